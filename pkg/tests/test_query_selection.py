"""TIQS: cosine logits, stable top-k against a sort oracle, anchor priors."""

import math

import numpy as np
import pytest
import torch

from ovground.boxes import NormBox
from ovground.config import ModelConfig
from ovground.errors import ConfigError, InputError
from ovground.query_selection import (
    TIQS,
    QuerySet,
    cosine_similarity_matrix,
    grid_anchor_priors,
    inverse_sigmoid,
)


def tiny_cfg(**overrides):
    base = dict(
        feature_dim=8, num_heads=2, num_encoder_layers=2, num_text_layers=2,
        num_decoder_layers=2, top_k=4, image_size=64, max_text_len=4,
        num_feature_levels=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_tiqs(**overrides):
    torch.manual_seed(0)
    return TIQS(tiny_cfg(**overrides))


def flat_priors(t):
    return torch.full((t, 4), 0.5)


class TestSimilarityLogits:
    def test_identical_unit_vectors(self):
        tiqs = make_tiqs()
        v = torch.tensor([[1.0, 0, 0, 0, 0, 0, 0, 0]], dtype=torch.float64)
        logits = tiqs.similarity_logits(v, v)
        np.testing.assert_allclose(float(logits[0, 0]), 1.0, atol=1e-12)

    def test_orthogonal_vectors(self):
        tiqs = make_tiqs()
        a = torch.zeros(1, 8, dtype=torch.float64)
        b = torch.zeros(1, 8, dtype=torch.float64)
        a[0, 0] = 1.0
        b[0, 1] = 1.0
        logits = tiqs.similarity_logits(a, b)
        np.testing.assert_allclose(float(logits[0, 0]), 0.0, atol=1e-12)

    def test_known_cosine(self):
        tiqs = make_tiqs()
        a = torch.zeros(1, 8, dtype=torch.float64)
        b = torch.zeros(1, 8, dtype=torch.float64)
        a[0, 0] = 1.0
        b[0, 0] = b[0, 1] = 1.0 / math.sqrt(2.0)
        logits = tiqs.similarity_logits(a, b)
        np.testing.assert_allclose(float(logits[0, 0]), 0.707107, atol=1e-6)

    def test_zero_rows_cosine_zero(self):
        tiqs = make_tiqs()
        logits = tiqs.similarity_logits(torch.zeros(2, 8), torch.randn(3, 8))
        assert float(logits.abs().max()) == 0.0

    def test_masked_columns_minus_inf(self):
        tiqs = make_tiqs()
        mask = torch.tensor([True, False, True])
        logits = tiqs.similarity_logits(torch.randn(4, 8), torch.randn(3, 8), mask)
        assert bool(torch.isinf(logits[:, 1]).all())
        assert bool(torch.isfinite(logits[:, [0, 2]]).all())

    def test_degenerate_inputs_rejected(self):
        tiqs = make_tiqs()
        with pytest.raises(InputError):
            tiqs.similarity_logits(torch.randn(0, 8), torch.randn(2, 8))
        with pytest.raises(InputError):
            tiqs.similarity_logits(torch.randn(2, 8), torch.randn(2, 8),
                                   torch.zeros(2, dtype=torch.bool))

    def test_scale_invariance(self):
        tiqs = make_tiqs()
        gen = torch.Generator().manual_seed(42)
        v_img = torch.randn(10, 8, generator=gen, dtype=torch.float64)
        v_txt = torch.randn(5, 8, generator=gen, dtype=torch.float64)
        base = tiqs.similarity_logits(v_img, v_txt)
        for scale in (0.1, 10.0):
            scaled = v_img.clone()
            scaled[3] = scaled[3] * scale
            logits = tiqs.similarity_logits(scaled, v_txt)
            assert float((logits - base).abs().max()) < 1e-9

    def test_entries_bounded(self):
        tiqs = make_tiqs()
        gen = torch.Generator().manual_seed(7)
        logits = tiqs.similarity_logits(
            torch.randn(50, 8, generator=gen), torch.randn(9, 8, generator=gen)
        )
        assert float(logits.max()) <= 1.0 + 1e-6
        assert float(logits.min()) >= -1.0 - 1e-6


class TestSelectTopK:
    def test_known_ordering(self):
        tiqs = make_tiqs()
        logits = torch.tensor([[0.1], [0.9], [0.5]])
        qs = tiqs.select_topk(logits, torch.randn(3, 8), 2, priors=flat_priors(3))
        assert qs.indices.tolist() == [1, 2]
        np.testing.assert_allclose(qs.scores.detach().numpy(), [0.9, 0.5], atol=1e-7)

    def test_full_selection_sorted(self):
        tiqs = make_tiqs()
        logits = torch.tensor([[0.3], [0.8], [0.1], [0.5]])
        qs = tiqs.select_topk(logits, torch.randn(4, 8), 4, priors=flat_priors(4))
        assert qs.indices.tolist() == [1, 3, 0, 2]

    def test_tie_breaks_to_lower_index(self):
        tiqs = make_tiqs()
        logits = torch.tensor([[0.5], [0.5]])
        qs = tiqs.select_topk(logits, torch.randn(2, 8), 1, priors=flat_priors(2))
        assert qs.indices.tolist() == [0]

    def test_reduction_is_max_over_text(self):
        tiqs = make_tiqs()
        logits = torch.tensor([[0.1, 0.9], [0.5, 0.2]])
        qs = tiqs.select_topk(logits, torch.randn(2, 8), 2, priors=flat_priors(2))
        assert qs.indices.tolist() == [0, 1]  # max 0.9 beats max 0.5
        np.testing.assert_allclose(qs.scores.detach().numpy(), [0.9, 0.5], atol=1e-7)

    def test_invalid_k_rejected(self):
        tiqs = make_tiqs()
        logits = torch.zeros(3, 1)
        with pytest.raises(ConfigError):
            tiqs.select_topk(logits, torch.randn(3, 8), 0, priors=flat_priors(3))
        with pytest.raises(ConfigError):
            tiqs.select_topk(logits, torch.randn(3, 8), 4, priors=flat_priors(3))

    def test_contents_are_selected_token_rows(self):
        tiqs = make_tiqs()
        v_img = torch.randn(5, 8)
        logits = torch.tensor([[0.1], [0.9], [0.5], [0.7], [0.2]])
        qs = tiqs.select_topk(logits, v_img, 3, priors=flat_priors(5))
        assert torch.equal(qs.contents, v_img[torch.tensor([1, 3, 2])])

    def test_matches_brute_force_sort_oracle(self):
        tiqs = make_tiqs()
        rng = np.random.default_rng(42)
        for _ in range(1000):
            t = int(rng.integers(1, 65))
            l = int(rng.integers(1, 17))
            k = int(rng.integers(1, t + 1))
            # quantized scores force frequent ties
            sim = np.round(rng.uniform(-1, 1, size=(t, l)), 1)
            reduced = sim.max(axis=1)
            expected = sorted(range(t), key=lambda i: (-reduced[i], i))[:k]
            qs = tiqs.select_topk(
                torch.from_numpy(sim).float(), torch.randn(t, 8), k,
                priors=flat_priors(t),
            )
            assert qs.indices.tolist() == expected

    def test_masked_text_never_determines_score(self):
        tiqs = make_tiqs()
        gen = torch.Generator().manual_seed(3)
        v_img = torch.randn(6, 8, generator=gen)
        v_txt = torch.randn(3, 8, generator=gen)
        # make the masked token a perfect match for token 0
        v_txt[2] = v_img[0] * 5.0
        mask = torch.tensor([True, True, False])
        full = tiqs.similarity_logits(v_img, v_txt, mask)
        trimmed = tiqs.similarity_logits(v_img, v_txt[:2])
        qs_full = tiqs.select_topk(full, v_img, 3, priors=flat_priors(6))
        qs_trim = tiqs.select_topk(trimmed, v_img, 3, priors=flat_priors(6))
        assert qs_full.indices.tolist() == qs_trim.indices.tolist()
        np.testing.assert_allclose(
            qs_full.scores.detach().numpy(), qs_trim.scores.detach().numpy(), atol=1e-7
        )


class TestAnchors:
    def test_priors_cover_grid(self):
        cfg = tiny_cfg()
        priors = grid_anchor_priors(cfg)
        assert priors.shape == (320, 4)
        # first token of level 0: center of cell (0,0) on a 16x16 grid
        np.testing.assert_allclose(priors[0].numpy(), [0.03125, 0.03125, 0.25, 0.25])
        # first token of level 1: 8x8 grid, stride 8
        np.testing.assert_allclose(priors[256].numpy(), [0.0625, 0.0625, 0.5, 0.5])
        assert float(priors.min()) > 0.0
        assert float(priors.max()) < 1.0

    def test_prior_size_capped(self):
        cfg = tiny_cfg(num_feature_levels=3, image_size=64, top_k=4)
        priors = grid_anchor_priors(cfg)
        assert float(priors[:, 2:].max()) < 1.0

    def test_zero_init_head_returns_priors(self):
        tiqs = make_tiqs()
        v_img = torch.randn(320, 8)
        logits = torch.rand(320, 1)
        qs = tiqs.select_topk(logits, v_img, 4)
        expected = tiqs.anchor_priors[qs.indices]
        np.testing.assert_allclose(
            qs.anchors.detach().numpy(), expected.numpy(), atol=1e-6
        )

    def test_anchors_always_in_unit_box(self):
        tiqs = make_tiqs()
        with torch.no_grad():
            for p in tiqs.anchor_head.parameters():
                p.copy_(torch.randn_like(p) * 3.0)
        qs = tiqs.select_topk(torch.rand(320, 2), torch.randn(320, 8) * 10, 4)
        anchors = qs.anchors.detach()
        assert float(anchors.min()) >= 0.0
        assert float(anchors.max()) <= 1.0
        for box in qs.norm_boxes():  # valid even at sigmoid saturation
            assert isinstance(box, NormBox)

    def test_inverse_sigmoid_round_trip(self):
        x = torch.linspace(0.01, 0.99, 50, dtype=torch.float64)
        back = torch.sigmoid(inverse_sigmoid(x))
        np.testing.assert_allclose(back.numpy(), x.numpy(), atol=1e-9)


class TestQuerySetInvariants:
    def test_non_increasing_scores_enforced(self):
        with pytest.raises(InputError):
            QuerySet(
                contents=torch.randn(2, 8),
                anchors=torch.full((2, 4), 0.5),
                indices=torch.tensor([0, 1]),
                scores=torch.tensor([0.1, 0.9]),
            )

    def test_unique_indices_enforced(self):
        with pytest.raises(InputError):
            QuerySet(
                contents=torch.randn(2, 8),
                anchors=torch.full((2, 4), 0.5),
                indices=torch.tensor([3, 3]),
                scores=torch.tensor([0.9, 0.1]),
            )

    def test_forward_uses_config_k(self):
        tiqs = make_tiqs()
        gen = torch.Generator().manual_seed(1)
        qs = tiqs(torch.randn(320, 8, generator=gen),
                  torch.randn(3, 8, generator=gen),
                  torch.ones(3, dtype=torch.bool))
        assert qs.k == 4

    def test_gradient_flows_to_anchor_head(self):
        tiqs = make_tiqs()
        with torch.no_grad():  # move the head off its zero init
            for p in tiqs.anchor_head.parameters():
                p.copy_(torch.randn_like(p) * 0.1)
        qs = tiqs(torch.randn(320, 8), torch.randn(2, 8))
        qs.anchors.sum().backward()
        grad = tiqs.anchor_head[0].weight.grad
        assert grad is not None and float(grad.abs().max()) > 0.0
