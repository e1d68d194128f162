"""LGFA: semantic map, Gaussian-of-cosine scores, blending, gradients."""

import math

import numpy as np
import pytest
import torch

from helpers import central_difference_at, max_rel_err, randomize_parameters
from ovground.config import ModelConfig
from ovground.errors import ConfigError, InputError
from ovground.feature_attention import (
    LGFA,
    SIGMA_FLOOR,
    blend,
    gaussian_cosine_score,
    row_cosine,
)


def tiny_cfg(**overrides):
    base = dict(
        feature_dim=8, num_heads=2, num_encoder_layers=2, num_text_layers=2,
        num_decoder_layers=2, top_k=4, image_size=64, max_text_len=4,
        num_feature_levels=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


class TestSemanticMap:
    def test_single_text_token_broadcast(self):
        torch.manual_seed(0)
        lgfa = LGFA(tiny_cfg())
        v_img = torch.randn(5, 8)
        v_txt = torch.randn(1, 8)
        sem = lgfa.semantic_map(v_img, v_txt)
        # one key: attention copies its value row to every query
        expected = lgfa.semantic_attn.out_proj(lgfa.semantic_attn.v_proj(v_txt))
        for row in sem:
            np.testing.assert_allclose(
                row.detach().numpy(), expected[0].detach().numpy(), atol=1e-6
            )

    def test_identical_text_tokens_identical_rows(self):
        torch.manual_seed(0)
        lgfa = LGFA(tiny_cfg())
        v_txt = torch.randn(1, 8).repeat(4, 1)
        sem = lgfa.semantic_map(torch.randn(6, 8), v_txt)
        for row in sem[1:]:
            np.testing.assert_allclose(
                row.detach().numpy(), sem[0].detach().numpy(), atol=1e-6
            )

    def test_all_masked_rejected(self):
        lgfa = LGFA(tiny_cfg())
        with pytest.raises(InputError):
            lgfa.semantic_map(
                torch.randn(3, 8), torch.randn(2, 8),
                text_mask=torch.zeros(2, dtype=torch.bool),
            )

    def test_masked_token_ignored(self):
        torch.manual_seed(0)
        lgfa = LGFA(tiny_cfg())
        v_img = torch.randn(4, 8)
        kept = torch.randn(2, 8)
        mask = torch.tensor([True, True, False])
        a = lgfa.semantic_map(v_img, torch.cat([kept, torch.randn(1, 8)]), mask)
        b = lgfa.semantic_map(v_img, torch.cat([kept, torch.randn(1, 8) * 9]), mask)
        np.testing.assert_allclose(a.detach().numpy(), b.detach().numpy(), atol=1e-6)


class TestScore:
    def test_perfect_alignment_scores_alpha(self):
        s = gaussian_cosine_score(torch.tensor(1.0), torch.tensor(1.0), torch.tensor(1.0))
        assert float(s) == 1.0

    def test_orthogonal_scores_exp_half(self):
        one = torch.tensor(1.0, dtype=torch.float64)
        s = gaussian_cosine_score(torch.tensor(0.0, dtype=torch.float64), one, one)
        np.testing.assert_allclose(float(s), math.exp(-0.5), rtol=1e-12)
        np.testing.assert_allclose(float(s), 0.6065306597126334, rtol=1e-9)

    def test_zero_alpha_zeroes_scores(self):
        cos = torch.linspace(-1, 1, 7)
        s = gaussian_cosine_score(cos, torch.tensor(0.0), torch.tensor(1.0))
        assert float(s.abs().max()) == 0.0

    def test_bounded_by_alpha(self):
        rng = torch.Generator().manual_seed(42)
        cos = torch.rand(10_000, generator=rng) * 2.0 - 1.0
        for alpha in (0.5, 1.0, 2.5):
            s = gaussian_cosine_score(cos, torch.tensor(alpha), torch.tensor(0.8))
            assert float(s.min()) > 0.0
            assert float(s.max()) <= alpha + 1e-9

    def test_strictly_increasing_in_cosine(self):
        cos = torch.linspace(-1.0, 1.0, 1000, dtype=torch.float64)
        s = gaussian_cosine_score(cos, torch.tensor(1.0, dtype=torch.float64),
                                  torch.tensor(0.7, dtype=torch.float64))
        diffs = s[1:] - s[:-1]
        assert float(diffs.min()) > 0.0

    def test_module_scores_bounded_on_random_tokens(self):
        torch.manual_seed(0)
        lgfa = LGFA(tiny_cfg())
        randomize_parameters(lgfa, seed=1)
        with torch.no_grad():
            lgfa.alpha.copy_(torch.tensor(1.3))
        with torch.no_grad():
            scores = lgfa.score(torch.randn(500, 8), torch.randn(500, 8))
        assert float(scores.max()) <= 1.3 + 1e-9
        assert float(scores.min()) > 0.0

    def test_zero_rows_score_as_cosine_zero(self):
        assert float(row_cosine(torch.zeros(1, 8), torch.ones(1, 8))) == 0.0
        s = gaussian_cosine_score(torch.tensor(0.0), torch.tensor(1.0), torch.tensor(1.0))
        assert math.isfinite(float(s))

    def test_sigma_floor_holds(self):
        lgfa = LGFA(tiny_cfg())
        with torch.no_grad():
            lgfa.rho.copy_(torch.tensor(-40.0))
            assert float(lgfa.sigma) >= SIGMA_FLOOR
            s = lgfa.score(torch.randn(3, 8), torch.randn(3, 8))
        assert torch.isfinite(s).all()

    def test_sigma_initialized_to_one(self):
        lgfa = LGFA(tiny_cfg())
        np.testing.assert_allclose(float(lgfa.sigma.detach()), 1.0, rtol=1e-6)
        np.testing.assert_allclose(float(lgfa.alpha.detach()), 1.0)


class TestBlend:
    def test_beta_zero_is_identity(self):
        v = torch.randn(6, 8)
        out = blend(v, torch.rand(6), beta=0.0)
        assert torch.equal(out, v)

    def test_beta_one_unit_scores_identity(self):
        v = torch.randn(6, 8)
        out = blend(v, torch.ones(6), beta=1.0)
        np.testing.assert_allclose(out.numpy(), v.numpy(), atol=1e-7)

    def test_paper_beta_with_zero_scores(self):
        v = torch.randn(6, 8)
        out = blend(v, torch.zeros(6), beta=0.7)
        np.testing.assert_allclose(out.numpy(), (0.3 * v).numpy(), atol=1e-7)

    def test_beta_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            blend(torch.randn(2, 4), torch.rand(2), beta=1.5)
        with pytest.raises(ConfigError):
            blend(torch.randn(2, 4), torch.rand(2), beta=-0.1)

    def test_matrix_linearity(self):
        rng = np.random.default_rng(42)
        v = rng.normal(size=(10, 6))
        s = rng.uniform(size=10)
        beta = 0.7
        expected = (1.0 - beta) * v + beta * (v * s[:, None])
        got = blend(torch.from_numpy(v), torch.from_numpy(s), beta)
        np.testing.assert_allclose(got.numpy(), expected, atol=1e-12)


class TestFullLGFA:
    def test_forward_shapes(self):
        torch.manual_seed(0)
        lgfa = LGFA(tiny_cfg())
        out, scores = lgfa(torch.randn(12, 8), torch.randn(3, 8),
                           torch.ones(3, dtype=torch.bool))
        assert out.shape == (12, 8)
        assert scores.shape == (12,)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        lgfa = LGFA(tiny_cfg()).double()
        randomize_parameters(lgfa, seed=2, scale=0.4)
        with torch.no_grad():
            lgfa.alpha.copy_(torch.tensor(1.1, dtype=torch.float64))
            lgfa.rho.copy_(torch.tensor(0.3, dtype=torch.float64))
        v_txt = torch.randn(3, 8, dtype=torch.float64,
                            generator=torch.Generator().manual_seed(3))
        weights = torch.randn(6, 8, dtype=torch.float64,
                              generator=torch.Generator().manual_seed(4))

        def scalar(vi):
            out, scores = lgfa(vi, v_txt)
            return (out * weights).sum() + scores.sum()

        x = torch.randn(6, 8, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(5)).requires_grad_(True)
        scalar(x).backward()
        idx = list(range(0, 48, 5))
        fd = central_difference_at(scalar, x.detach().clone(), idx)
        assert max_rel_err(x.grad.reshape(-1)[idx], fd) < 1e-4

    def test_parameter_gradients_flow(self):
        torch.manual_seed(0)
        lgfa = LGFA(tiny_cfg())
        out, _ = lgfa(torch.randn(6, 8), torch.randn(3, 8))
        out.sum().backward()
        assert lgfa.alpha.grad is not None and float(lgfa.alpha.grad.abs()) > 0
        assert lgfa.rho.grad is not None
