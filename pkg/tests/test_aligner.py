"""Feature aligner: losses, SCR weights, stage-1 training."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anomaly3d import aligner as al
from anomaly3d import autodiff as ad
from anomaly3d.encoder import FeatureSet, MODALITY_ALIGNED, MODALITY_RENDER, MODALITY_RGB


def unit_rows(rng, *shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def feature_set(rng, modality, V=3, N=4, d=8):
    return FeatureSet(modality=modality, G=unit_rows(rng, V, d),
                      F=unit_rows(rng, V, N, d), grid=(2, 2))


class TestAlign:
    def test_identity_at_init(self):
        rng = np.random.default_rng(0)
        fs = feature_set(rng, MODALITY_RENDER)
        params = al.AlignerParams(d=8, seed=1)
        out = params.align(fs)
        assert out.modality == MODALITY_ALIGNED
        np.testing.assert_allclose(out.G, fs.G, atol=1e-12)
        np.testing.assert_allclose(out.F, fs.F, atol=1e-12)

    def test_output_norms_one(self):
        rng = np.random.default_rng(2)
        fs = feature_set(rng, MODALITY_RENDER)
        params = al.AlignerParams(d=8, seed=3)
        for p in params.parameters():
            p.data = p.data + 0.1 * rng.standard_normal(p.data.shape)
        out = params.align(fs)
        np.testing.assert_allclose(np.linalg.norm(out.G, axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(out.F, axis=-1), 1.0, atol=1e-12)

    def test_wrong_modality_rejected(self):
        rng = np.random.default_rng(4)
        fs = feature_set(rng, MODALITY_RGB)
        with pytest.raises(ValueError, match="rendering"):
            al.AlignerParams(d=8).align(fs)

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(5)
        fs = feature_set(rng, MODALITY_RENDER, d=6)
        with pytest.raises(ValueError, match="dimension mismatch"):
            al.AlignerParams(d=8).align(fs)


class TestLossAlign:
    def test_perfect_alignment_is_zero(self):
        rng = np.random.default_rng(6)
        fs = feature_set(rng, MODALITY_ALIGNED)
        rgb = FeatureSet(modality=MODALITY_RGB, G=fs.G.copy(), F=fs.F.copy(), grid=fs.grid)
        lg, ll, total = al.loss_align(fs, rgb)
        assert abs(lg) < 1e-12 and abs(ll) < 1e-12 and abs(total) < 1e-12

    def test_orthogonal_pairs(self):
        d = 8
        g = np.zeros((2, d))
        g[:, 0] = 1.0
        f = np.zeros((2, 3, d))
        f[:, :, 1] = 1.0
        a = FeatureSet(modality=MODALITY_ALIGNED, G=g, F=f, grid=(1, 3))
        g2, f2 = np.zeros_like(g), np.zeros_like(f)
        g2[:, 2] = 1.0
        f2[:, :, 3] = 1.0
        b = FeatureSet(modality=MODALITY_RGB, G=g2, F=f2, grid=(1, 3))
        lg, ll, total = al.loss_align(a, b)
        assert lg == 1.0 and ll == 1.0 and total == 2.0

    def test_antiparallel_pairs(self):
        rng = np.random.default_rng(7)
        fs = feature_set(rng, MODALITY_ALIGNED)
        rgb = FeatureSet(modality=MODALITY_RGB, G=-fs.G, F=-fs.F, grid=fs.grid)
        _, _, total = al.loss_align(fs, rgb)
        assert abs(total - 4.0) < 1e-12

    def test_zero_norm_vector_rejected(self):
        rng = np.random.default_rng(8)
        fs = feature_set(rng, MODALITY_ALIGNED)
        rgb = feature_set(rng, MODALITY_RGB)
        rgb.G[0] = 0.0
        with pytest.raises(ValueError, match="zero-norm"):
            al.loss_align(fs, rgb)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_boundedness(self, seed):
        rng = np.random.default_rng(seed)
        a = feature_set(rng, MODALITY_ALIGNED)
        b = feature_set(rng, MODALITY_RGB)
        lg, ll, total = al.loss_align(a, b)
        assert 0.0 <= lg <= 2.0 and 0.0 <= ll <= 2.0 and 0.0 <= total <= 4.0


class TestConsistencyAndScr:
    def test_identity_for_matching_orthonormal_rows(self):
        F = np.eye(4)[:3]
        C = al.consistency_matrix(F, F)
        np.testing.assert_allclose(C, np.eye(3), atol=1e-12)

    def test_entries_bounded(self):
        rng = np.random.default_rng(9)
        C = al.consistency_matrix(unit_rows(rng, 6, 5), unit_rows(rng, 6, 5))
        assert np.all(np.abs(C) <= 1.0 + 1e-12)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(10)
        a, b = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
        C = al.consistency_matrix(a, b)
        for i in range(4):
            for j in range(4):
                assert abs(C[i, j] - float(a[i] @ b[j])) < 1e-12

    def test_raw_mode_skips_normalization(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((3, 4)) * 2.0
        b = rng.standard_normal((3, 4)) * 0.5
        np.testing.assert_allclose(al.consistency_matrix(a, b, normalized=False), a @ b.T)

    def test_weights_at_zero_consistency(self):
        c, w = al.scr_weights(np.zeros((3, 3)), 1.0)
        np.testing.assert_allclose(c, 0.0)
        np.testing.assert_allclose(w, 1.5)

    def test_weights_disabled_at_zero_strength(self):
        rng = np.random.default_rng(12)
        _, w = al.scr_weights(rng.uniform(-1, 1, (5, 5)), 0.0)
        np.testing.assert_allclose(w, 1.0)

    def test_weight_closed_form(self):
        _, w = al.scr_weights(np.ones((2, 2)), 1.0)
        expected = 1.0 + 1.0 / (1.0 + np.exp(-1.0))
        np.testing.assert_allclose(w, expected)
        assert abs(expected - 1.7310585786300049) < 1e-15

    @given(st.integers(0, 2 ** 31 - 1), st.floats(1e-6, 4.0))
    @settings(max_examples=60, deadline=None)
    def test_weights_strictly_inside_band_and_monotone(self, seed, strength):
        rng = np.random.default_rng(seed)
        C = rng.uniform(-1, 1, size=(8, 8))
        c, w = al.scr_weights(C, strength)
        assert np.all(w > 1.0) and np.all(w < 1.0 + strength)
        order = np.argsort(c)
        assert np.all(np.diff(w[order]) >= 0)


class TestWeightedLoss:
    def test_reduces_to_unweighted_at_zero_strength(self):
        rng = np.random.default_rng(13)
        fa = feature_set(rng, MODALITY_ALIGNED)
        fr = feature_set(rng, MODALITY_RGB)
        base = feature_set(rng, MODALITY_RENDER)
        lg0, ll0, t0 = al.loss_align(fa, fr)
        lg1, ll1, t1 = al.loss_align_weighted(fa, fr, base, strength=0.0)
        assert abs(lg0 - lg1) < 1e-12 and abs(ll0 - ll1) < 1e-12 and abs(t0 - t1) < 1e-12

    def test_perfect_alignment_zero_regardless_of_strength(self):
        rng = np.random.default_rng(14)
        fa = feature_set(rng, MODALITY_ALIGNED)
        fr = FeatureSet(modality=MODALITY_RGB, G=fa.G.copy(), F=fa.F.copy(), grid=fa.grid)
        base = feature_set(rng, MODALITY_RENDER)
        _, llw, total = al.loss_align_weighted(fa, fr, base, strength=2.5)
        assert abs(llw) < 1e-12 and abs(total) < 1e-12

    def test_single_patch_hand_case(self):
        # residual 0.4 at consistency 0, strength 1 -> weight 1.5 -> 0.6
        d = 4
        f_al = np.zeros((1, 1, d))
        f_al[0, 0, 0] = 1.0
        f_rgb = np.zeros((1, 1, d))
        f_rgb[0, 0] = [0.6, 0.8, 0, 0]      # cosine 0.6 -> residual 0.4
        f_r = np.zeros((1, 1, d))
        f_r[0, 0, 2] = 1.0                  # orthogonal -> c = 0
        G = np.zeros((1, d))
        G[0, 0] = 1.0
        fa = FeatureSet(modality=MODALITY_ALIGNED, G=G, F=f_al, grid=(1, 1))
        fr = FeatureSet(modality=MODALITY_RGB, G=G.copy(), F=f_rgb, grid=(1, 1))
        base = FeatureSet(modality=MODALITY_RENDER, G=G.copy(), F=f_r, grid=(1, 1))
        _, llw, _ = al.loss_align_weighted(fa, fr, base, strength=1.0)
        assert abs(llw - 0.6) < 1e-12

    def test_monotone_weighting_for_equal_residuals(self):
        # Two patches, equal residuals; higher consistency -> weight and
        # contribution at least as large.
        rng = np.random.default_rng(15)
        base_vec = unit_rows(rng, 1, 6)[0]
        f_rgb = np.stack([base_vec, base_vec])[None]
        f_al = f_rgb.copy()
        f_r = np.stack([base_vec, -base_vec])[None]    # c = +1 and -1
        G = unit_rows(rng, 1, 6)
        fa = FeatureSet(modality=MODALITY_ALIGNED, G=G, F=f_al, grid=(1, 2))
        fr = FeatureSet(modality=MODALITY_RGB, G=G.copy(), F=f_rgb, grid=(1, 2))
        fb = FeatureSet(modality=MODALITY_RENDER, G=G.copy(), F=f_r, grid=(1, 2))
        C = al.consistency_matrix(fb.F[0], fr.F[0])
        _, w = al.scr_weights(C, 1.0)
        assert w[0] >= w[1]


class TestTrainStage1:
    def _pairs(self, rng, n=4, d=8):
        out = []
        for _ in range(n):
            fr = feature_set(rng, MODALITY_RENDER, d=d)
            frgb = feature_set(rng, MODALITY_RGB, d=d)
            out.append((fr, frgb))
        return out

    def test_objective_flips_once_at_activation(self):
        rng = np.random.default_rng(16)
        pairs = self._pairs(rng, n=2, d=4)
        params = al.AlignerParams(d=4, seed=17)
        scr = al.ScrConfig(strength=1.0, activation_epoch=6)
        history = al.train_stage1(pairs, params, scr, epochs=10, batch_size=2)
        labels = history["objective"]
        assert labels[:6] == ["align"] * 6
        assert labels[6:] == ["align_w"] * 4
        flips = sum(a != b for a, b in zip(labels[:-1], labels[1:]))
        assert flips == 1

    def test_zero_strength_matches_pre_activation_run(self):
        rng = np.random.default_rng(18)
        pairs = self._pairs(rng, n=2, d=4)

        def run(strength, activation):
            params = al.AlignerParams(d=4, seed=19)
            scr = al.ScrConfig(strength=strength, activation_epoch=activation)
            hist = al.train_stage1(pairs, params, scr, epochs=8, batch_size=2)
            return np.array(hist["loss"]), params

        loss_a, params_a = run(0.0, 0)      # weighted from epoch 0 with lambda=0
        loss_b, params_b = run(1.0, 8)      # never activates
        np.testing.assert_array_equal(loss_a, loss_b)
        for pa, pb in zip(params_a.parameters(), params_b.parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_solvable_linear_task_converges(self):
        # F_rgb = Q F_render for a fixed orthogonal Q, then renormalized.
        rng = np.random.default_rng(20)
        d = 8
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        pairs = []
        for _ in range(40):
            fr = feature_set(rng, MODALITY_RENDER, V=2, N=4, d=d)
            g = fr.G @ q.T
            f = fr.F @ q.T
            frgb = FeatureSet(modality=MODALITY_RGB,
                              G=g / np.linalg.norm(g, axis=-1, keepdims=True),
                              F=f / np.linalg.norm(f, axis=-1, keepdims=True),
                              grid=fr.grid)
            pairs.append((fr, frgb))
        params = al.AlignerParams(d=d, d_h=32, seed=21)
        scr = al.ScrConfig(strength=1.0, activation_epoch=200)
        history = al.train_stage1(pairs, params, scr, epochs=250, batch_size=4)
        assert history["loss"][-1] < 0.01

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            al.train_stage1([], al.AlignerParams(d=4),
                            al.ScrConfig(activation_epoch=0), epochs=1)

    def test_deterministic_under_fixed_seed(self):
        rng1 = np.random.default_rng(22)
        pairs = self._pairs(rng1, n=2, d=4)

        def run():
            params = al.AlignerParams(d=4, seed=23)
            scr = al.ScrConfig(strength=0.5, activation_epoch=2)
            al.train_stage1(pairs, params, scr, epochs=4, batch_size=2)
            return [p.data.copy() for p in params.parameters()]

        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 4.0))
@settings(max_examples=40, deadline=None)
def test_weighted_loss_bounded(seed, strength):
    rng = np.random.default_rng(seed)
    fa = feature_set(rng, MODALITY_ALIGNED)
    fr = feature_set(rng, MODALITY_RGB)
    base = feature_set(rng, MODALITY_RENDER)
    _, llw, total = al.loss_align_weighted(fa, fr, base, strength=strength)
    assert 0.0 <= llw <= 2.0 * (1.0 + strength) + 1e-12
    assert 0.0 <= total <= 2.0 + 2.0 * (1.0 + strength) + 1e-12


def test_gradcheck_weighted_alignment():
    from anomaly3d.testsupport import LOSS_CHECKS
    rng = np.random.default_rng(24)
    assert LOSS_CHECKS["local_align_weighted"](rng) < 1e-4


def test_checkpoint_state_round_trip(tmp_path):
    from anomaly3d import io_formats as io
    rng = np.random.default_rng(25)
    params = al.AlignerParams(d=6, seed=26)
    for p in params.parameters():
        p.data = p.data + rng.standard_normal(p.data.shape)
        p.m = rng.standard_normal(p.m.shape)
        p.v = np.abs(rng.standard_normal(p.v.shape))
        p.step = 17
    path = tmp_path / "s1.a3ck"
    io.write_checkpoint(path, params.state_tensors())
    fresh = al.AlignerParams(d=6, seed=99)
    fresh.load_state(io.read_checkpoint(path))
    for a, b in zip(params.parameters(), fresh.parameters()):
        np.testing.assert_array_equal(b.data, a.data.astype(np.float32).astype(np.float64))
        assert b.step == 17
        assert b.name == a.name
    names = {p.name for p in params.parameters()}
    assert all(n.startswith("aligner.g.") or n.startswith("aligner.l.") for n in names)
