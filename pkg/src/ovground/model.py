"""End-to-end grounding pipeline and checkpoint serialization.

Backbone -> fusion encoder -> query selection -> feature attention ->
decoder, with the top-1 final-layer box as the prediction.  Query
selection reads the pre-attention fused image tokens by default; the
decoder's image cross-attention always reads the attention-modulated
ones (a config switch feeds the modulated tokens to selection instead).

Checkpoints are flat npz archives: one array per named parameter or
buffer, plus a single JSON metadata entry holding the model config and
the vocabulary, so a checkpoint alone rebuilds the model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ovground.backbone import Vocabulary, build_backbones
from ovground.boxes import BBox
from ovground.config import ModelConfig
from ovground.decoder import CrossModalityDecoder, DecoderOutput
from ovground.encoder import CrossModalEncoder, FusedFeatures
from ovground.errors import InputError
from ovground.feature_attention import LGFA
from ovground.query_selection import TIQS, QuerySet

CHECKPOINT_META_KEY = "__meta__"
CHECKPOINT_VERSION = 1


def image_to_tensor(image, dtype=torch.float32) -> torch.Tensor:
    """Accept HxWx3 uint8 or float arrays/tensors; floats assumed in [0, 1]."""
    tensor = torch.as_tensor(np.asarray(image))
    if tensor.ndim != 3 or tensor.shape[2] != 3:
        raise InputError(f"expected HxWx3 image, got shape {tuple(tensor.shape)}")
    if not tensor.dtype.is_floating_point:
        tensor = tensor.to(dtype) / 255.0
    return tensor.to(dtype)


@dataclass
class GroundingResult:
    """Everything the losses and reporting need from one forward pass."""

    fused: FusedFeatures
    lgfa_scores: torch.Tensor
    queries: QuerySet
    output: DecoderOutput

    def top1_box(self, clip: bool = True) -> BBox:
        return self.output.top1_box(clip=clip)


class GroundingModel(nn.Module):
    """Open-vocabulary visual grounding network at a configurable scale."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.vocab = vocab
        self.image_backbone, self.text_backbone = build_backbones(cfg, vocab)
        self.encoder = CrossModalEncoder(cfg)
        self.lgfa = LGFA(cfg)
        self.tiqs = TIQS(cfg)
        self.decoder = CrossModalityDecoder(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def forward(self, image, expression: str) -> GroundingResult:
        pyr = self.image_backbone(image_to_tensor(image, self.dtype))
        txt = self.text_backbone(expression)
        fused = self.encoder(pyr, txt)
        v_mod, lgfa_scores = self.lgfa(fused.v_img, fused.v_txt, fused.text_mask)
        selection_feats = v_mod if self.cfg.tiqs_on_attended else fused.v_img
        queries = self.tiqs(selection_feats, fused.v_txt, fused.text_mask)
        output = self.decoder(queries, v_mod, fused.v_txt, fused.text_mask)
        return GroundingResult(
            fused=fused, lgfa_scores=lgfa_scores, queries=queries, output=output
        )

    # Algorithm-level alias: the whole pipeline as one call
    forward_pipeline = forward

    def text_embedding(self, fused: FusedFeatures) -> torch.Tensor:
        """Masked mean over the fused text tokens; the t_i of the contrastive loss."""
        keep = fused.text_mask.to(fused.v_txt.dtype).unsqueeze(-1)
        return (fused.v_txt * keep).sum(dim=0) / keep.sum().clamp_min(1.0)

    def predict(self, image, expression: str) -> BBox:
        with torch.no_grad():
            return self(image, expression).top1_box(clip=True)


def build_model(cfg: ModelConfig, vocab: Vocabulary) -> GroundingModel:
    return GroundingModel(cfg, vocab)


def save_checkpoint(model: GroundingModel, path) -> None:
    arrays = {
        name: tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    if CHECKPOINT_META_KEY in arrays:
        raise InputError(f"parameter name collides with {CHECKPOINT_META_KEY}")
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "vocab": list(model.vocab.tokens),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays, **{CHECKPOINT_META_KEY: np.array(json.dumps(meta))})


def load_checkpoint(path) -> GroundingModel:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if CHECKPOINT_META_KEY not in data.files:
            raise InputError(f"{path} has no checkpoint metadata entry")
        meta = json.loads(data[CHECKPOINT_META_KEY].item())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise InputError(
                f"unsupported checkpoint format_version {meta.get('format_version')!r}"
            )
        cfg = ModelConfig(**meta["config"])
        vocab = Vocabulary.from_tokens(meta["vocab"])
        model = GroundingModel(cfg, vocab)
        expected = set(model.state_dict())
        stored = set(data.files) - {CHECKPOINT_META_KEY}
        if stored != expected:
            missing = sorted(expected - stored)[:3]
            extra = sorted(stored - expected)[:3]
            raise InputError(
                f"checkpoint parameters do not match the model: "
                f"missing {missing}, unexpected {extra}"
            )
        state = {name: torch.from_numpy(data[name]) for name in stored}
    model.load_state_dict(state, strict=True)
    return model
