import math

import numpy as np
import pytest
import torch

import oracles
from helpers import (
    random_embeddings,
    random_probs,
    random_pseudo,
    random_scribbles,
    random_tristate,
)
from scribseg.core import (
    DownscaledLabelMap,
    Label,
    LossConfig,
    PredictionGrid,
    PseudoLabelMap,
    ScaleSpec,
    ScribbleMap,
)
from scribseg.losses import (
    PairBatch,
    contrastive_loss,
    pair_batch_loss,
    pair_label,
    pseudo_loss,
    sample_pixels,
    scribble_loss,
    supervision_loss,
    total_loss,
)


def scrib(fg, bg):
    return ScribbleMap(np.asarray(fg, bool), np.asarray(bg, bool))


class TestScribbleLoss:
    def test_perfect_prediction_is_near_zero(self):
        fg = np.array([[True, False]])
        bg = np.array([[False, True]])
        pred = PredictionGrid(np.array([[1.0, 0.0]]))
        loss = float(scribble_loss(pred, scrib(fg, bg)))
        assert loss == pytest.approx(0.0, abs=1e-6)
        assert loss == pytest.approx(-math.log(1.0 - 1e-7), rel=1e-6)

    def test_single_fg_at_half(self):
        pred = np.array([[0.5]])
        loss = float(scribble_loss(pred, scrib([[True]], [[False]])))
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_three_pixel_worked_example(self):
        # fg strokes at t=0.9 and t=0.8, bg stroke at t=0.3
        pred = np.array([[0.9, 0.8, 0.3]])
        fg = np.array([[True, True, False]])
        bg = np.array([[False, False, True]])
        loss = float(scribble_loss(pred, scrib(fg, bg)))
        assert loss == pytest.approx(0.22839300363692283, abs=1e-12)

    def test_empty_scribbles_raise(self):
        with pytest.raises(ValueError, match="no scribbled pixels"):
            scribble_loss(np.full((4, 4), 0.5), scrib(np.zeros((4, 4)), np.zeros((4, 4))))

    def test_matches_oracle_on_random_fixtures(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            probs = random_probs(rng)
            sm = random_scribbles(rng)
            got = float(scribble_loss(probs, sm))
            want = oracles.scribble_loss_naive(probs, sm.fg, sm.bg)
            assert got == pytest.approx(want, abs=1e-12)
            assert got >= 0.0


class TestPseudoLoss:
    def test_empty_confident_set_is_zero(self):
        pm = PseudoLabelMap(np.full((3, 3), Label.IGNORE, dtype=np.int8))
        assert float(pseudo_loss(np.full((3, 3), 0.5), pm)) == 0.0

    def test_single_fg_pixel(self):
        pm = PseudoLabelMap(np.array([[1]], dtype=np.int8))
        loss = float(pseudo_loss(np.array([[0.25]]), pm))
        assert loss == pytest.approx(-math.log(0.25), abs=1e-12)

    def test_mixed_four_pixel_matches_oracle(self):
        probs = np.array([[0.2, 0.7], [0.9, 0.4]])
        labels = np.array([[0, 1], [1, -1]], dtype=np.int8)
        got = float(pseudo_loss(probs, PseudoLabelMap(labels)))
        want = oracles.pseudo_loss_naive(probs, labels)
        assert got == pytest.approx(want, abs=1e-9)

    def test_matches_oracle_on_random_fixtures(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            probs = random_probs(rng)
            pm = random_pseudo(rng)
            got = float(pseudo_loss(probs, pm))
            assert got == pytest.approx(oracles.pseudo_loss_naive(probs, pm.labels), abs=1e-12)
            assert got >= 0.0


class TestSupervisionLoss:
    def test_zero_weight_reduces_to_scribble(self):
        rng = np.random.default_rng(13)
        probs = random_probs(rng)
        sm = random_scribbles(rng)
        pm = random_pseudo(rng)
        assert float(supervision_loss(probs, sm, pm, 0.0)) == float(scribble_loss(probs, sm))

    def test_linear_combination(self):
        rng = np.random.default_rng(14)
        probs = random_probs(rng)
        sm = random_scribbles(rng)
        pm = random_pseudo(rng)
        ls = float(scribble_loss(probs, sm))
        lp = float(pseudo_loss(probs, pm))
        got = float(supervision_loss(probs, sm, pm, 0.5))
        assert got == pytest.approx(ls + 0.5 * lp, abs=1e-12)


class TestPairLabel:
    @pytest.mark.parametrize("a,b,op,want", [
        (1, 0, "or", 1), (0, 0, "or", 0), (1, 1, "or", 1),
        (1, 0, "and", 0), (1, 1, "and", 1),
        (0, 0, "xnor", 1), (1, 1, "xnor", 1), (1, 0, "xnor", 0),
    ])
    def test_truth_table(self, a, b, op, want):
        assert pair_label(a, b, op) == want

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            pair_label(2, 0, "or")

    def test_rejects_unknown_op(self):
        with pytest.raises(ValueError):
            pair_label(0, 1, "nand")


class TestSamplePixels:
    def test_cap_not_binding_returns_all(self):
        labels = np.array([[1] * 10 + [0] * 10], dtype=np.int8)
        fg, bg = sample_pixels(labels, cap=6000, seed=0)
        assert len(fg) == 10 and len(bg) == 10

    def test_cap_binds_exactly(self):
        rng = np.random.default_rng(0)
        labels = (rng.uniform(size=(120, 120)) < 0.8).astype(np.int8)  # ~11.5k fg
        fg, bg = sample_pixels(labels, cap=6000, seed=1)
        assert len(fg) == 6000
        assert len(np.unique(fg)) == 6000
        assert (labels.ravel()[fg] == 1).all()

    def test_deterministic_for_fixed_seed(self):
        rng = np.random.default_rng(2)
        labels = random_tristate(rng, (32, 32))
        a = sample_pixels(labels, cap=50, seed=7)
        b = sample_pixels(labels, cap=50, seed=7)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_never_samples_ignore(self):
        rng = np.random.default_rng(3)
        labels = random_tristate(rng, (16, 16), p_ignore=0.5)
        fg, bg = sample_pixels(labels, cap=1000, seed=0)
        flat = labels.ravel()
        assert (flat[fg] == 1).all() and (flat[bg] == 0).all()

    def test_all_ignore_raises(self):
        with pytest.raises(ValueError, match="no confident pixels"):
            sample_pixels(np.full((4, 4), -1, dtype=np.int8), cap=10, seed=0)

    def test_bad_cap_raises(self):
        with pytest.raises(ValueError):
            sample_pixels(np.zeros((2, 2), dtype=np.int8), cap=0, seed=0)


class TestContrastiveLoss:
    def test_identical_fg_pair_closed_form(self):
        emb = np.zeros((2, 1, 2))
        emb[0, 0, :] = 1.0
        labels = np.array([[1, 1]], dtype=np.int8)
        got = float(contrastive_loss(emb, labels, temperature=1.0, op="or"))
        want = -math.log(1.0 / (1.0 + math.exp(-1.0)))
        assert got == pytest.approx(want, abs=1e-12)
        assert got == pytest.approx(0.3132616875182228, abs=1e-12)

    def test_orthogonal_mixed_pair_closed_form(self):
        emb = np.zeros((2, 1, 2))
        emb[0, 0, 0] = 1.0
        emb[1, 0, 1] = 1.0
        labels = np.array([[1, 0]], dtype=np.int8)
        got = float(contrastive_loss(emb, labels, temperature=1.0, op="or"))
        assert got == pytest.approx(math.log(2.0), abs=1e-12)

    def test_full_sample_equals_unsampled(self):
        rng = np.random.default_rng(21)
        emb = random_embeddings(rng)
        labels = random_tristate(rng, (8, 8))
        full = contrastive_loss(emb, labels, 0.3, "or")
        sample = sample_pixels(labels, cap=10_000, seed=5)
        sampled = contrastive_loss(emb, labels, 0.3, "or", sample=sample)
        assert float(sampled) == pytest.approx(float(full), abs=1e-9)

    @pytest.mark.parametrize("op", ["or", "and", "xnor"])
    def test_matches_double_loop_oracle(self, op):
        rng = np.random.default_rng(22)
        for _ in range(5):
            emb = random_embeddings(rng, channels=3, shape=(5, 5))
            labels = random_tristate(rng, (5, 5))
            got = float(contrastive_loss(emb, labels, 0.3, op))
            want = oracles.contrastive_loss_naive(emb, labels, 0.3, op)
            assert got == pytest.approx(want, abs=1e-9)
            assert got >= 0.0

    def test_cosine_scale_invariance(self):
        rng = np.random.default_rng(23)
        emb = random_embeddings(rng)
        labels = random_tristate(rng, (8, 8))
        base = float(contrastive_loss(emb, labels, 0.1, "or"))
        scaled = emb.copy()
        scaled[:, ::2, :] *= 37.5
        scaled[:, 1::2, :] *= 0.004
        assert float(contrastive_loss(scaled, labels, 0.1, "or")) == pytest.approx(base, abs=1e-9)

    def test_temperature_monotonicity_on_mismatched_pair(self):
        # target 0 with positive cosine: shrinking the temperature can only hurt
        emb = np.zeros((2, 1, 2))
        emb[0, 0, 0] = 1.0
        emb[0, 0, 1] = 1.0
        emb[1, 0, 1] = 0.3
        labels = np.array([[0, 0]], dtype=np.int8)
        losses = [float(contrastive_loss(emb, labels, t, "or")) for t in (1.0, 0.3, 0.1)]
        assert losses[0] <= losses[1] <= losses[2]

    def test_permutation_invariance(self):
        rng = np.random.default_rng(24)
        emb = random_embeddings(rng, channels=3, shape=(4, 6))
        labels = random_tristate(rng, (4, 6))
        base = float(contrastive_loss(emb, labels, 0.3, "or"))
        # permute the flat cell enumeration and rebuild the grids
        perm = rng.permutation(24)
        emb_p = emb.reshape(3, 24)[:, perm].reshape(3, 4, 6)
        lab_p = labels.reshape(24)[perm].reshape(4, 6)
        assert float(contrastive_loss(emb_p, lab_p, 0.3, "or")) == pytest.approx(base, abs=1e-9)

    def test_degenerate_pair_set_raises(self):
        emb = np.ones((2, 2, 2))
        labels = np.full((2, 2), -1, dtype=np.int8)
        labels[0, 0] = 1
        with pytest.raises(ValueError, match="degenerate pair set"):
            contrastive_loss(emb, labels, 0.3, "or")

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            contrastive_loss(np.ones((2, 4, 4)), np.zeros((5, 4), dtype=np.int8), 0.3)

    def test_zero_embedding_raises(self):
        emb = np.zeros((2, 1, 2))
        emb[0, 0, 0] = 1.0
        labels = np.array([[1, 1]], dtype=np.int8)
        with pytest.raises(ValueError, match="zero embedding"):
            contrastive_loss(emb, labels, 0.3, "or")

    def test_sampled_cells_must_be_confident(self):
        emb = np.ones((2, 2, 2))
        labels = np.array([[1, -1], [0, -1]], dtype=np.int8)
        with pytest.raises(ValueError, match="ignore-labeled"):
            contrastive_loss(emb, labels, 0.3, "or", sample=np.array([0, 1]))


class TestGradients:
    def test_scribble_loss_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(31)
        probs = random_probs(rng, (8, 8))
        sm = random_scribbles(rng, (8, 8))
        t = torch.tensor(probs, dtype=torch.float64, requires_grad=True)
        scribble_loss(t, sm).backward()
        num = oracles.central_diff_grad(lambda p: oracles.scribble_loss_naive(p, sm.fg, sm.bg), probs)
        rel = np.abs(t.grad.numpy() - num).max() / max(np.abs(num).max(), 1e-12)
        assert rel <= 1e-4

    def test_contrastive_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(32)
        emb = random_embeddings(rng, channels=3, shape=(4, 4))
        labels = random_tristate(rng, (4, 4))
        z = torch.tensor(emb, dtype=torch.float64, requires_grad=True)
        contrastive_loss(z, labels, 0.3, "or").backward()
        num = oracles.central_diff_grad(
            lambda e: oracles.contrastive_loss_naive(e, labels, 0.3, "or"), emb)
        rel = np.abs(z.grad.numpy() - num).max() / max(np.abs(num).max(), 1e-12)
        assert rel <= 1e-4


class TestTotalLoss:
    def _fixture(self, seed=41):
        rng = np.random.default_rng(seed)
        probs = random_probs(rng, (8, 8))
        sm = random_scribbles(rng, (8, 8))
        pm = random_pseudo(rng, (8, 8))
        emb1 = random_embeddings(rng, channels=4, shape=(8, 8))
        emb4 = random_embeddings(rng, channels=4, shape=(2, 2))
        lab1 = DownscaledLabelMap(random_tristate(rng, (8, 8)), factor=1)
        lab4 = DownscaledLabelMap(np.array([[1, 0], [0, 1]], dtype=np.int8), factor=4)
        return probs, sm, pm, [emb1, emb4], [lab1, lab4]

    def test_disabled_regularizers_reduce_to_supervision(self):
        probs, sm, pm, embs, labs = self._fixture()
        cfg = LossConfig(scales=(ScaleSpec(5, 1, 0.3, 0.0), ScaleSpec(3, 4, 0.1, 0.0)))
        total, bd = total_loss(probs, sm, pm, embs, labs, cfg)
        assert float(total) == pytest.approx(float(supervision_loss(probs, sm, pm, 0.5)), abs=1e-12)

    def test_default_weights_match_hand_assembly(self):
        probs, sm, pm, embs, labs = self._fixture()
        cfg = LossConfig()
        total, bd = total_loss(probs, sm, pm, embs, labs, cfg)
        want = (oracles.scribble_loss_naive(probs, sm.fg, sm.bg)
                + 0.5 * oracles.pseudo_loss_naive(probs, pm.labels)
                + 0.5 * oracles.contrastive_loss_naive(embs[0], labs[0].labels, 0.3, "or")
                + 10.0 * oracles.contrastive_loss_naive(embs[1], labs[1].labels, 0.1, "or"))
        assert float(total) == pytest.approx(want, abs=1e-9)

    def test_single_scale(self):
        probs, sm, pm, embs, labs = self._fixture()
        cfg = LossConfig(scales=(ScaleSpec(5, 1, 0.3, 0.5),))
        total, bd = total_loss(probs, sm, pm, embs[:1], labs[:1], cfg)
        want = float(supervision_loss(probs, sm, pm, 0.5)) \
            + 0.5 * float(contrastive_loss(embs[0], labs[0], 0.3, "or"))
        assert float(total) == pytest.approx(want, abs=1e-12)

    def test_breakdown_sums_to_total(self):
        probs, sm, pm, embs, labs = self._fixture()
        cfg = LossConfig()
        total, bd = total_loss(probs, sm, pm, embs, labs, cfg)
        recon = float(bd["scribble"]) + cfg.pseudo_weight * float(bd["pseudo"])
        for spec, key in zip(cfg.scales, ("contrast1_x1", "contrast2_x4")):
            recon += spec.weight * float(bd[key])
        assert float(bd["total"]) == pytest.approx(float(total), abs=0.0)
        assert recon == pytest.approx(float(total), abs=1e-9)

    def test_sampled_total_is_deterministic(self):
        probs, sm, pm, embs, labs = self._fixture()
        cfg = LossConfig(sample_cap=5)
        a, _ = total_loss(probs, sm, pm, embs, labs, cfg, sample_seed=123)
        b, _ = total_loss(probs, sm, pm, embs, labs, cfg, sample_seed=123)
        assert float(a) == float(b)

    def test_factor_mismatch_raises(self):
        probs, sm, pm, embs, labs = self._fixture()
        cfg = LossConfig(scales=(ScaleSpec(5, 2, 0.3, 0.5), ScaleSpec(3, 4, 0.1, 10.0)))
        with pytest.raises(ValueError, match="factor"):
            total_loss(probs, sm, pm, embs, labs, cfg)

    def test_length_mismatch_raises(self):
        probs, sm, pm, embs, labs = self._fixture()
        with pytest.raises(ValueError, match="length mismatch"):
            total_loss(probs, sm, pm, embs[:1], labs, LossConfig())


class TestPairBatch:
    def test_pair_count_and_validation(self):
        rng = np.random.default_rng(51)
        emb = random_embeddings(rng, channels=3, shape=(3, 3))
        labels = random_tristate(rng, (3, 3), p_ignore=0.2)
        n = int((labels != -1).sum())
        batch = PairBatch.from_cells(emb, labels)
        assert batch.pair_count == n * (n - 1)
        assert batch.validate() == []

    def test_batch_loss_agrees_with_matrix_path(self):
        rng = np.random.default_rng(52)
        emb = random_embeddings(rng, channels=3, shape=(4, 4))
        labels = random_tristate(rng, (4, 4))
        batch = PairBatch.from_cells(emb, labels)
        got = pair_batch_loss(batch, 0.3, "or")
        want = float(contrastive_loss(emb, labels, 0.3, "or"))
        assert got == pytest.approx(want, abs=1e-9)

    def test_validate_flags_bad_labels(self):
        batch = PairBatch(np.array([0]), np.array([1]), np.array([2]), np.array([0]),
                          np.ones((1, 3)), np.ones((1, 3)))
        assert "pair labels outside {0, 1}" in batch.validate()
