"""Pluggable image and text feature extractors.

The network downstream of the backbones only sees two containers:
``ImageFeaturePyramid`` (multi-scale grids, one per level) and
``TextTokens`` (token embeddings plus validity mask).  The shipped
stand-ins are small trainable modules: a strided linear patch embedding
per pyramid level for images, and a learned token table plus positional
table over a whitespace vocabulary for text.  Swapping in heavier
encoders means registering a factory that emits the same containers;
nothing downstream changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from ovground.config import ModelConfig
from ovground.errors import ConfigError, InputError

UNK_TOKEN = "<unk>"


def tokenize(text: str) -> list:
    """Lowercase whitespace tokenization shared by vocab build and embed."""
    return text.lower().split()


@dataclass(frozen=True)
class Vocabulary:
    """Token table with a reserved UNK row at index 0."""

    tokens: tuple
    token_to_id: dict = field(compare=False)

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != UNK_TOKEN:
            raise InputError("vocabulary must reserve index 0 for the UNK token")

    @classmethod
    def build(cls, corpus) -> "Vocabulary":
        """Collect sorted unique lowercase tokens from an iterable of strings."""
        seen = set()
        for text in corpus:
            seen.update(tokenize(text))
        seen.discard(UNK_TOKEN)
        tokens = (UNK_TOKEN,) + tuple(sorted(seen))
        return cls(tokens=tokens, token_to_id={t: i for i, t in enumerate(tokens)})

    @classmethod
    def from_tokens(cls, tokens) -> "Vocabulary":
        """Rebuild from a previously saved token list (UNK first)."""
        tokens = tuple(tokens)
        return cls(tokens=tokens, token_to_id={t: i for i, t in enumerate(tokens)})

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.token_to_id

    def encode(self, text: str) -> list:
        """Token ids for a string; out-of-vocabulary tokens map to UNK."""
        return [self.token_to_id.get(t, 0) for t in tokenize(text)]


@dataclass
class ImageFeaturePyramid:
    """Per-level feature grids of shape (H_l, W_l, C) with their strides."""

    levels: tuple
    strides: tuple

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise InputError("one stride per pyramid level required")
        if not self.levels:
            raise InputError("pyramid must have at least one level")
        channels = {lvl.shape[-1] for lvl in self.levels}
        if len(channels) != 1:
            raise InputError(f"pyramid levels disagree on channel dim: {sorted(channels)}")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise InputError(f"strides must be strictly increasing, got {self.strides}")

    @property
    def channels(self) -> int:
        return int(self.levels[0].shape[-1])

    @property
    def num_tokens(self) -> int:
        return sum(int(lvl.shape[0] * lvl.shape[1]) for lvl in self.levels)

    @property
    def level_shapes(self) -> tuple:
        return tuple((int(lvl.shape[0]), int(lvl.shape[1])) for lvl in self.levels)


@dataclass
class TextTokens:
    """Embedded text: (L, C) embeddings, validity mask, token strings."""

    embeddings: torch.Tensor
    mask: torch.Tensor
    tokens: tuple

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise InputError(f"text embeddings must be (L, C), got {tuple(self.embeddings.shape)}")
        length = self.embeddings.shape[0]
        if self.mask.shape != (length,):
            raise InputError(f"mask length {tuple(self.mask.shape)} != token count {length}")
        if len(self.tokens) != length:
            raise InputError(f"{len(self.tokens)} token strings for {length} embeddings")
        if length and not bool(self.mask.any()):
            raise InputError("all text positions masked")
        with torch.no_grad():
            masked = self.embeddings[~self.mask]
            if masked.numel() and float(masked.abs().max()) != 0.0:
                raise InputError("masked positions must carry zero embeddings")

    @property
    def length(self) -> int:
        return int(self.embeddings.shape[0])


class ToyImageBackbone(nn.Module):
    """Strided linear patch embedding per level; stride doubles each level."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.image_size = cfg.image_size
        self.strides = cfg.strides
        self.patchers = nn.ModuleList(
            nn.Conv2d(3, cfg.feature_dim, kernel_size=s, stride=s) for s in self.strides
        )

    def forward(self, image: torch.Tensor) -> ImageFeaturePyramid:
        if image.ndim != 3 or image.shape[2] != 3:
            raise InputError(f"expected HxWx3 image, got shape {tuple(image.shape)}")
        if image.shape[0] != self.image_size or image.shape[1] != self.image_size:
            raise InputError(
                f"image must be resized to {self.image_size}x{self.image_size}, "
                f"got {image.shape[0]}x{image.shape[1]}"
            )
        x = image.permute(2, 0, 1).unsqueeze(0)  # (1, 3, H, W)
        levels = []
        for patcher in self.patchers:
            grid = patcher(x)[0]  # (C, H_l, W_l)
            levels.append(grid.permute(1, 2, 0))  # (H_l, W_l, C)
        return ImageFeaturePyramid(levels=tuple(levels), strides=self.strides)

    def embed_image(self, image: torch.Tensor) -> ImageFeaturePyramid:
        return self(image)


class ToyTextBackbone(nn.Module):
    """Learned token table + learned positional table over a fixed vocabulary."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        self.vocab = vocab
        self.max_text_len = cfg.max_text_len
        self.token_table = nn.Embedding(len(vocab), cfg.feature_dim)
        self.position_table = nn.Embedding(cfg.max_text_len, cfg.feature_dim)

    def forward(self, expression: str) -> TextTokens:
        tokens = tokenize(expression)
        if not tokens:
            raise InputError("expression has no tokens")
        tokens = tokens[: self.max_text_len]
        ids = torch.tensor(
            [self.vocab.token_to_id.get(t, 0) for t in tokens], dtype=torch.long
        )
        positions = torch.arange(len(tokens), dtype=torch.long)
        embeddings = self.token_table(ids) + self.position_table(positions)
        mask = torch.ones(len(tokens), dtype=torch.bool)
        return TextTokens(embeddings=embeddings, mask=mask, tokens=tuple(tokens))

    def embed_text(self, expression: str) -> TextTokens:
        return self(expression)


def _build_toy(cfg: ModelConfig, vocab: Vocabulary):
    return ToyImageBackbone(cfg), ToyTextBackbone(cfg, vocab)


BACKBONE_FACTORIES = {"toy": _build_toy}


def register_backbone(name: str, factory) -> None:
    """Expose a (cfg, vocab) -> (image_backbone, text_backbone) factory."""
    BACKBONE_FACTORIES[name] = factory


def build_backbones(cfg: ModelConfig, vocab: Vocabulary):
    factory = BACKBONE_FACTORIES.get(cfg.backbone)
    if factory is None:
        raise ConfigError(
            f"unknown backbone {cfg.backbone!r}; registered: {sorted(BACKBONE_FACTORIES)}"
        )
    return factory(cfg, vocab)
