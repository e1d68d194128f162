"""Language-guided feature attention.

Every image token gets a semantic map entry by attending over the text
tokens; the token's relevance score is a Gaussian of its cosine
similarity with that entry,

    S_x = alpha * exp(-(1 - cos)^2 / (2 * sigma^2)),

computed after separate linear projections and row-wise L2
normalization of both operands.  Image features are then re-weighted as
beta * v * S + (1 - beta) * v.  alpha and sigma are learnable; sigma is
kept positive through a softplus reparameterization with a hard floor,
and both start at 1.0 so the initial modulation is close to neutral.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from ovground.config import ModelConfig
from ovground.encoder import MultiHeadAttention
from ovground.errors import ConfigError

SIGMA_FLOOR = 1e-3
NORM_EPS = 1e-12
# softplus(rho) + floor == 1.0 at init
_RHO_INIT = math.log(math.expm1(1.0 - SIGMA_FLOOR))


def row_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-aligned cosine similarity; zero rows yield cosine 0, not NaN."""
    na = a.norm(dim=-1).clamp_min(NORM_EPS)
    nb = b.norm(dim=-1).clamp_min(NORM_EPS)
    return (a * b).sum(dim=-1) / (na * nb)


def gaussian_cosine_score(cos, alpha, sigma):
    """S = alpha * exp(-(1 - cos)^2 / (2 sigma^2)); elementwise."""
    gap = 1.0 - cos
    return alpha * torch.exp(-(gap * gap) / (2.0 * sigma * sigma))


def blend(v_img: torch.Tensor, scores: torch.Tensor, beta: float) -> torch.Tensor:
    """beta * (v ⊙ S) + (1 - beta) * v, broadcasting S over channels."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    return beta * v_img * scores.unsqueeze(-1) + (1.0 - beta) * v_img


class LGFA(nn.Module):
    """Score image tokens against the text and re-weight their features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.beta = cfg.beta
        self.semantic_attn = MultiHeadAttention(cfg.feature_dim, cfg.num_heads)
        self.v_proj = nn.Linear(cfg.feature_dim, cfg.feature_dim)
        self.s_proj = nn.Linear(cfg.feature_dim, cfg.feature_dim)
        self.alpha = nn.Parameter(torch.tensor(1.0))
        self.rho = nn.Parameter(torch.tensor(_RHO_INIT))

    @property
    def sigma(self) -> torch.Tensor:
        return SIGMA_FLOOR + F.softplus(self.rho)

    def semantic_map(self, v_img, v_txt, text_mask=None):
        out, _ = self.semantic_attn(v_img, v_txt, key_mask=text_mask)
        return out

    def score(self, v_img, v_sem) -> torch.Tensor:
        cos = row_cosine(self.v_proj(v_img), self.s_proj(v_sem))
        return gaussian_cosine_score(cos, self.alpha, self.sigma)

    def forward(self, v_img, v_txt, text_mask=None):
        """Returns (re-weighted image tokens, per-token scores)."""
        scores = self.score(v_img, self.semantic_map(v_img, v_txt, text_mask))
        return blend(v_img, scores, self.beta), scores
