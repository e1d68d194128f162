"""Text-image query selection.

Every image token is scored against every text token by cosine
similarity; a token's selection score is its best match over the valid
text tokens.  The top-k tokens become decoder queries: content vectors
are the token features themselves, anchor boxes come from a small
zero-initialized refinement head added, in inverse-sigmoid space, to the
token's grid-cell prior (cell center, width/height tied to the level
stride).  Ties in the score sort break toward the lower token index so
selection is fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ovground.boxes import NormBox
from ovground.config import ModelConfig
from ovground.errors import ConfigError, InputError

NORM_EPS = 1e-12
PRIOR_SIZE_CAP = 1.0 - 1e-3


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(eps, 1.0 - eps)
    return torch.log(x / (1.0 - x))


def cosine_similarity_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(N, C) x (M, C) -> (N, M) cosines; zero rows behave as cosine 0."""
    a_hat = a / a.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)
    b_hat = b / b.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)
    return a_hat @ b_hat.T


def grid_anchor_priors(cfg: ModelConfig, dtype=torch.float32) -> torch.Tensor:
    """(T, 4) cxcywh priors: cell centers, size 4*stride/image_size per level."""
    rows = []
    for (h, w), stride in zip(cfg.level_shapes, cfg.strides):
        ys = (torch.arange(h, dtype=dtype) + 0.5) / h
        xs = (torch.arange(w, dtype=dtype) + 0.5) / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        size = min(4.0 * stride / cfg.image_size, PRIOR_SIZE_CAP)
        wh = torch.full((h * w, 2), size, dtype=dtype)
        rows.append(torch.cat([gx.reshape(-1, 1), gy.reshape(-1, 1), wh], dim=1))
    return torch.cat(rows, dim=0)


@dataclass
class QuerySet:
    """k selected queries: contents, cxcywh anchors, source indices, scores."""

    contents: torch.Tensor
    anchors: torch.Tensor
    indices: torch.Tensor
    scores: torch.Tensor

    def __post_init__(self):
        k = self.contents.shape[0]
        if self.anchors.shape != (k, 4):
            raise InputError(f"anchors shape {tuple(self.anchors.shape)} != ({k}, 4)")
        if self.indices.shape != (k,) or self.scores.shape != (k,):
            raise InputError("one index and one score per query required")
        idx = self.indices.tolist()
        if len(set(idx)) != len(idx):
            raise InputError("selected token indices must be unique")
        s = self.scores.detach()
        if k > 1 and bool((s[1:] > s[:-1]).any()):
            raise InputError("selection scores must be non-increasing")

    @property
    def k(self) -> int:
        return int(self.contents.shape[0])

    def norm_boxes(self) -> tuple:
        # saturated sigmoids can emit exact zeros; floor them so the
        # NormBox positivity invariant holds at this boundary
        return tuple(
            NormBox(float(cx), float(cy), max(float(w), 1e-6), max(float(h), 1e-6))
            for cx, cy, w, h in self.anchors.detach().tolist()
        )


class TIQS(nn.Module):
    """Select top-k text-aligned image tokens as decoder queries."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.anchor_head = nn.Sequential(
            nn.Linear(cfg.feature_dim, cfg.feature_dim),
            nn.ReLU(),
            nn.Linear(cfg.feature_dim, 4),
        )
        with torch.no_grad():
            self.anchor_head[-1].weight.zero_()
            self.anchor_head[-1].bias.zero_()
        self.register_buffer("anchor_priors", grid_anchor_priors(cfg))

    def similarity_logits(self, v_img, v_txt, text_mask=None) -> torch.Tensor:
        """(T, L) cosine logits; masked text columns carry -inf."""
        if v_img.shape[0] == 0 or v_txt.shape[0] == 0:
            raise InputError("similarity needs nonempty image and text streams")
        if text_mask is not None:
            if text_mask.shape != (v_txt.shape[0],):
                raise InputError("one mask entry per text token required")
            if not bool(text_mask.any()):
                raise InputError("similarity over fully masked text")
        logits = cosine_similarity_matrix(v_img, v_txt)
        if text_mask is not None:
            logits = logits.masked_fill(~text_mask.view(1, -1), float("-inf"))
        return logits

    def select_topk(self, logits, v_img, k, priors=None) -> QuerySet:
        num_tokens = v_img.shape[0]
        if priors is None:
            priors = self.anchor_priors
        if k <= 0:
            raise ConfigError(f"top-k must be positive, got {k}")
        if k > num_tokens:
            raise ConfigError(f"top-k {k} exceeds {num_tokens} image tokens")
        if priors.shape[0] != num_tokens:
            raise InputError(
                f"{num_tokens} tokens do not match the configured grid of "
                f"{priors.shape[0]} priors"
            )
        reduced = logits.max(dim=1).values
        order = torch.argsort(reduced.detach(), descending=True, stable=True)
        chosen = order[:k]
        contents = v_img[chosen]
        priors = priors[chosen].to(contents.dtype)
        anchors = torch.sigmoid(inverse_sigmoid(priors) + self.anchor_head(contents))
        return QuerySet(
            contents=contents,
            anchors=anchors,
            indices=chosen,
            scores=reduced[chosen],
        )

    def forward(self, v_img, v_txt, text_mask=None, k=None) -> QuerySet:
        if k is None:
            k = self.cfg.top_k
        logits = self.similarity_logits(v_img, v_txt, text_mask)
        return self.select_topk(logits, v_img, k)
