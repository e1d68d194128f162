"""Cross-modality decoder.

Each layer runs query self-attention, image cross-attention over the
attention-modulated image tokens, and text cross-attention whose raw
output t_v enters the update

    t_q  <-  f_LN( f_LN(t_q + t_v) + f_FFN( f_LN(t_q + t_v) ) ),

with the inner normalization computed once and reused.  f_LN is layer
normalization by default; a config switch selects literal row-wise L2
normalization instead.  All attention output projections start at zero,
so a freshly built layer reduces to the bare update formula.

Anchors are refined layer by layer in inverse-sigmoid space by a
zero-initialized box head; per-layer query scores are the best cosine
alignment against the valid text tokens, and the final top-1 box is the
highest-scoring last-layer box in image pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ovground.boxes import BBox, NormBox
from ovground.config import ModelConfig
from ovground.encoder import CrossAttentionBlock, FeedForward, MultiHeadAttention
from ovground.errors import InputError
from ovground.query_selection import QuerySet, cosine_similarity_matrix, inverse_sigmoid

L2_EPS = 1e-12


def l2_normalize_rows(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(L2_EPS)


def alignment_scores(queries: torch.Tensor, v_txt: torch.Tensor, text_mask=None):
    """Best cosine match per query over valid text tokens; in [-1, 1]."""
    logits = cosine_similarity_matrix(queries, v_txt)
    if text_mask is not None:
        if not bool(text_mask.any()):
            raise InputError("alignment over fully masked text")
        logits = logits.masked_fill(~text_mask.view(1, -1), float("-inf"))
    return logits.max(dim=1).values


class DecoderLayer(nn.Module):
    """One decode step: attend (self, image, text) then apply the update."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dim, heads = cfg.feature_dim, cfg.num_heads
        self.self_norm = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, zero_init_output=True)
        self.image_block = CrossAttentionBlock(dim, heads, zero_init_output=True)
        self.text_query_norm = nn.LayerNorm(dim)
        self.text_key_norm = nn.LayerNorm(dim)
        self.text_attn = MultiHeadAttention(dim, heads, zero_init_output=True)
        self.update_mode = cfg.update_norm
        if self.update_mode == "layer":
            self.inner_norm = nn.LayerNorm(dim)
            self.outer_norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim)

    def _f_ln(self, x: torch.Tensor, which: str) -> torch.Tensor:
        if self.update_mode == "layer":
            return getattr(self, which)(x)
        return l2_normalize_rows(x)

    def attend(self, queries, v_img_mod, v_txt, text_mask=None):
        """Returns the post-attention query state and the raw text readout t_v."""
        normed = self.self_norm(queries)
        mixed, _ = self.self_attn(normed, normed)
        state = queries + mixed
        state = self.image_block(state, v_img_mod)
        t_v, _ = self.text_attn(
            self.text_query_norm(state), self.text_key_norm(v_txt), key_mask=text_mask
        )
        return state, t_v

    def update(self, state, t_v):
        base = self._f_ln(state + t_v, "inner_norm")
        return self._f_ln(base + self.ffn(base), "outer_norm")

    def forward(self, queries, v_img_mod, v_txt, text_mask=None):
        state, t_v = self.attend(queries, v_img_mod, v_txt, text_mask)
        return self.update(state, t_v)


@dataclass
class DecoderOutput:
    """Per-layer boxes (cxcywh in [0,1]), scores, and query states.

    Tensors are stacked over decoder layers; entry [-1] is the final
    layer.  ``image_size`` converts the top-1 normalized box to pixels.
    """

    boxes: torch.Tensor
    scores: torch.Tensor
    query_states: torch.Tensor
    image_size: int

    def __post_init__(self):
        layers, k, four = self.boxes.shape
        if four != 4:
            raise InputError(f"boxes must be (layers, k, 4), got {tuple(self.boxes.shape)}")
        if self.scores.shape != (layers, k):
            raise InputError("one score per box per layer required")
        if self.query_states.shape[:2] != (layers, k):
            raise InputError("one query state per box per layer required")
        if not bool(torch.isfinite(self.scores.detach()).all()):
            raise InputError("non-finite decoder scores")

    @property
    def num_queries(self) -> int:
        return int(self.boxes.shape[1])

    @property
    def final_boxes(self) -> torch.Tensor:
        return self.boxes[-1]

    @property
    def final_scores(self) -> torch.Tensor:
        return self.scores[-1]

    @property
    def final_queries(self) -> torch.Tensor:
        return self.query_states[-1]

    @property
    def top1_index(self) -> int:
        return int(self.final_scores.detach().argmax())

    def layer_norm_boxes(self, layer: int = -1) -> tuple:
        return tuple(
            NormBox(float(cx), float(cy), max(float(w), 1e-6), max(float(h), 1e-6))
            for cx, cy, w, h in self.boxes[layer].detach().tolist()
        )

    def top1_box(self, clip: bool = True) -> BBox:
        cx, cy, w, h = (float(v) for v in self.final_boxes[self.top1_index].detach())
        size = float(self.image_size)
        box = BBox(
            (cx - w / 2.0) * size, (cy - h / 2.0) * size,
            (cx + w / 2.0) * size, (cy + h / 2.0) * size,
        )
        return box.clip(size, size) if clip else box


class CrossModalityDecoder(nn.Module):
    """N_dec decode layers with shared per-layer anchor refinement."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.num_decoder_layers))
        self.box_head = nn.Sequential(
            nn.Linear(cfg.feature_dim, cfg.feature_dim),
            nn.ReLU(),
            nn.Linear(cfg.feature_dim, 4),
        )
        with torch.no_grad():
            self.box_head[-1].weight.zero_()
            self.box_head[-1].bias.zero_()
        self.layers_executed = 0

    def predict_boxes(self, queries, anchors, v_txt, text_mask=None):
        """Refine anchors from the query states; score by text alignment."""
        boxes = torch.sigmoid(inverse_sigmoid(anchors) + self.box_head(queries))
        scores = alignment_scores(queries, v_txt, text_mask)
        return boxes, scores

    def forward(self, queries: QuerySet, v_img_mod, v_txt, text_mask=None) -> DecoderOutput:
        state = queries.contents
        anchors = queries.anchors
        all_boxes, all_scores, all_states = [], [], []
        for layer in self.layers:
            state = layer(state, v_img_mod, v_txt, text_mask)
            anchors, scores = self.predict_boxes(state, anchors, v_txt, text_mask)
            all_boxes.append(anchors)
            all_scores.append(scores)
            all_states.append(state)
            self.layers_executed += 1
        return DecoderOutput(
            boxes=torch.stack(all_boxes),
            scores=torch.stack(all_scores),
            query_states=torch.stack(all_states),
            image_size=self.cfg.image_size,
        )
