"""Cross-modality fusion encoder.

Image features are flattened across pyramid levels, tagged with
sinusoidal positions and learned level embeddings, and self-attended;
text features are self-attended under their validity mask.  The two
streams are then fused for min(N_v, N_l) rounds, each round applying
text-to-image attention followed by image-to-text attention, with every
round feeding the next.  Deformable sampling is deliberately replaced by
dense attention over the concatenated tokens: quadratic cost is
irrelevant at the token counts this package targets.

The attention primitive here is shared with the feature-attention and
decoder modules.  Cross-modality attention zero-initializes its output
projection, so fusion starts as an exact identity and the network grows
into cross-modal mixing during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from ovground.backbone import ImageFeaturePyramid, TextTokens
from ovground.config import ModelConfig
from ovground.errors import ConfigError, InputError


class MultiHeadAttention(nn.Module):
    """Dense scaled-dot-product attention with optional key masking.

    ``zero_init_output`` zeroes the output projection (weights and bias)
    so the module contributes nothing until trained; the value
    projection bias is always zero so all-zero keys/values stay zero.
    Returns (output, attention weights) with weights of shape
    (heads, Q, K); masked keys receive exactly zero weight.
    """

    def __init__(self, dim: int, num_heads: int, zero_init_output: bool = False):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        with torch.no_grad():
            self.v_proj.bias.zero_()
            if zero_init_output:
                self.out_proj.weight.zero_()
                self.out_proj.bias.zero_()

    def forward(self, query: torch.Tensor, keys: torch.Tensor, key_mask=None):
        nq, nk = query.shape[0], keys.shape[0]
        if key_mask is not None:
            if key_mask.shape != (nk,):
                raise InputError(f"key mask shape {tuple(key_mask.shape)} != ({nk},)")
            if not bool(key_mask.any()):
                raise InputError("attention over fully masked keys")
        q = self.q_proj(query).reshape(nq, self.num_heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(keys).reshape(nk, self.num_heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(keys).reshape(nk, self.num_heads, self.head_dim).transpose(0, 1)
        logits = q @ k.transpose(1, 2) / math.sqrt(self.head_dim)  # (H, Q, K)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask.view(1, 1, nk), float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        mixed = (weights @ v).transpose(0, 1).reshape(nq, -1)
        return self.out_proj(mixed), weights


class FeedForward(nn.Module):
    """Two linear projections with ReLU in between."""

    def __init__(self, dim: int, hidden_mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden_mult * dim), nn.ReLU(), nn.Linear(hidden_mult * dim, dim)
        )

    def forward(self, x):
        return self.net(x)


class SelfAttentionBlock(nn.Module):
    """Pre-norm residual self-attention followed by a pre-norm FFN."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.ffn_norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim)

    def forward(self, x, mask=None):
        normed = self.attn_norm(x)
        attended, _ = self.attn(normed, normed, key_mask=mask)
        x = x + attended
        return x + self.ffn(self.ffn_norm(x))


class CrossAttentionBlock(nn.Module):
    """Pre-norm residual cross-attention; starts as identity when zero-init."""

    def __init__(self, dim: int, num_heads: int, zero_init_output: bool = True):
        super().__init__()
        self.query_norm = nn.LayerNorm(dim)
        self.key_norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, zero_init_output=zero_init_output)

    def forward(self, x, keys, key_mask=None):
        attended, _ = self.attn(self.query_norm(x), self.key_norm(keys), key_mask=key_mask)
        return x + attended


def flatten_levels(levels) -> tuple:
    """Flatten (H_l, W_l, C) grids into (T, C) tokens plus per-token level ids."""
    tokens, ids = [], []
    for idx, lvl in enumerate(levels):
        flat = lvl.reshape(-1, lvl.shape[-1])
        tokens.append(flat)
        ids.append(torch.full((flat.shape[0],), idx, dtype=torch.long))
    return torch.cat(tokens, dim=0), torch.cat(ids, dim=0)


def sinusoidal_position_encoding(h: int, w: int, dim: int, dtype=torch.float32,
                                 temperature: float = 10000.0) -> torch.Tensor:
    """Size-agnostic 2D sin/cos encoding, (h*w, dim); y in the first half."""
    if dim % 4 != 0:
        raise ConfigError(f"position encoding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    freqs = temperature ** (torch.arange(quarter, dtype=dtype) / quarter)
    ys = (torch.arange(h, dtype=dtype) + 0.5) / h
    xs = (torch.arange(w, dtype=dtype) + 0.5) / w
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")

    def encode(coord):
        args = coord.reshape(-1, 1) * (2.0 * math.pi) / freqs
        return torch.cat([args.sin(), args.cos()], dim=-1)

    return torch.cat([encode(grid_y), encode(grid_x)], dim=-1)


@dataclass
class FusedFeatures:
    """Fused streams: (T, C) image tokens with level ids, (L, C) text, mask."""

    v_img: torch.Tensor
    v_txt: torch.Tensor
    text_mask: torch.Tensor
    token_levels: torch.Tensor

    def __post_init__(self):
        if self.v_img.ndim != 2 or self.v_txt.ndim != 2:
            raise InputError("fused streams must be rank-2 (tokens, channels)")
        if self.token_levels.shape != (self.v_img.shape[0],):
            raise InputError("one level id per image token required")
        if self.text_mask.shape != (self.v_txt.shape[0],):
            raise InputError("one mask entry per text token required")

    @property
    def num_image_tokens(self) -> int:
        return int(self.v_img.shape[0])


class ImageEnhancer(nn.Module):
    """Flatten the pyramid, add position/level embeddings, self-attend."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.level_embed = nn.Embedding(cfg.num_feature_levels, cfg.feature_dim)
        self.layers = nn.ModuleList(
            SelfAttentionBlock(cfg.feature_dim, cfg.num_heads)
            for _ in range(cfg.num_encoder_layers)
        )

    def forward(self, pyr: ImageFeaturePyramid):
        tokens, level_ids = flatten_levels(pyr.levels)
        positions = torch.cat(
            [
                sinusoidal_position_encoding(
                    lvl.shape[0], lvl.shape[1], lvl.shape[2], dtype=tokens.dtype
                )
                for lvl in pyr.levels
            ],
            dim=0,
        )
        x = tokens + positions + self.level_embed(level_ids)
        for layer in self.layers:
            x = layer(x)
        return x, level_ids


class TextEnhancer(nn.Module):
    """Masked self-attention stack over text tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            SelfAttentionBlock(cfg.feature_dim, cfg.num_heads)
            for _ in range(cfg.num_text_layers)
        )

    def forward(self, txt: TextTokens):
        if not bool(txt.mask.any()):
            raise InputError("cannot enhance fully masked text")
        x = txt.embeddings
        keep = txt.mask.to(x.dtype).unsqueeze(-1)
        for layer in self.layers:
            x = layer(x, mask=txt.mask) * keep
        return x


class FusionRound(nn.Module):
    """One Eq.-style round: text->image update, then image->text update."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.text_to_image = CrossAttentionBlock(dim, num_heads)
        self.image_to_text = CrossAttentionBlock(dim, num_heads)

    def forward(self, v_img, v_txt, text_mask):
        v_img = self.text_to_image(v_img, v_txt, key_mask=text_mask)
        keep = text_mask.to(v_txt.dtype).unsqueeze(-1)
        v_txt = self.image_to_text(v_txt, v_img) * keep
        return v_img, v_txt


class FusionStack(nn.Module):
    """min(N_v, N_l) chained fusion rounds with an executed-round counter."""

    def __init__(self, dim: int, num_heads: int, n_rounds: int):
        super().__init__()
        if n_rounds < 1:
            raise ConfigError(f"fusion needs at least one round, got {n_rounds}")
        self.rounds = nn.ModuleList(FusionRound(dim, num_heads) for _ in range(n_rounds))
        self.rounds_executed = 0

    def forward(self, v_img, v_txt, text_mask, n_rounds=None):
        if n_rounds is None:
            n_rounds = len(self.rounds)
        if n_rounds < 1 or n_rounds > len(self.rounds):
            raise ConfigError(
                f"n_rounds must lie in [1, {len(self.rounds)}], got {n_rounds}"
            )
        for rnd in list(self.rounds)[:n_rounds]:
            v_img, v_txt = rnd(v_img, v_txt, text_mask)
            self.rounds_executed += 1
        return v_img, v_txt


class CrossModalEncoder(nn.Module):
    """Enhance both streams, then fuse them; emits FusedFeatures."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.image_enhancer = ImageEnhancer(cfg)
        self.text_enhancer = TextEnhancer(cfg)
        self.fusion = FusionStack(
            cfg.feature_dim,
            cfg.num_heads,
            min(cfg.num_encoder_layers, cfg.num_text_layers),
        )

    def enhance_image(self, pyr: ImageFeaturePyramid):
        return self.image_enhancer(pyr)

    def enhance_text(self, txt: TextTokens):
        return self.text_enhancer(txt)

    def fuse_streams(self, v_img, v_txt, text_mask, n_rounds=None):
        return self.fusion(v_img, v_txt, text_mask, n_rounds=n_rounds)

    def forward(self, pyr: ImageFeaturePyramid, txt: TextTokens) -> FusedFeatures:
        v_img, level_ids = self.enhance_image(pyr)
        v_txt = self.enhance_text(txt)
        v_img, v_txt = self.fuse_streams(v_img, v_txt, txt.mask)
        return FusedFeatures(
            v_img=v_img, v_txt=v_txt, text_mask=txt.mask, token_levels=level_ids
        )
