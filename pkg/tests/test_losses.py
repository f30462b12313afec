"""Objectives: closed-form similarity values, contrastive alignment loss
oracles (permutation controls, manual gathers), and the weighted total.
"""

import math

import numpy as np
import pytest

from conftest import gradcheck
from nla import losses as L
from nla import tensor as T
from nla import warp as W


class TestReconLoss:
    def test_zero_when_equal(self, rng):
        x = T.tensor(rng.normal(size=(2, 5, 3)), dtype=np.float64)
        assert L.recon_loss(x, x).item() == 0.0

    def test_unit_offset(self, rng):
        x = rng.normal(size=(2, 5, 3))
        out = L.recon_loss(T.tensor(x, dtype=np.float64), T.tensor(x + 1.0, dtype=np.float64))
        assert out.item() == pytest.approx(1.0)

    def test_matches_explicit_loop(self, rng):
        x = rng.normal(size=(2, 4, 3))
        y = rng.normal(size=(2, 4, 3))
        got = L.recon_loss(T.tensor(x, dtype=np.float64), T.tensor(y, dtype=np.float64)).item()
        acc = 0.0
        for b in range(2):
            for t in range(4):
                for c in range(3):
                    acc += (x[b, t, c] - y[b, t, c]) ** 2
        assert got == pytest.approx(acc / 24.0)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeMismatchError):
            L.recon_loss(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((3, 2))))


class TestSim:
    def test_orthogonal_gives_one(self):
        a = np.array([1.0, 0.0])
        b = np.array([0.0, 1.0])
        assert L.sim(T.tensor(a, dtype=np.float64), T.tensor(b, dtype=np.float64)).item() == pytest.approx(1.0)

    def test_saturation_limit(self):
        a = np.array([100.0])
        assert L.sim(T.tensor(a, dtype=np.float64), T.tensor(a, dtype=np.float64)).item() == pytest.approx(
            math.exp(5.0), rel=1e-6
        )

    def test_inner_product_five(self):
        a = np.array([math.sqrt(5.0)])
        got = L.sim(T.tensor(a, dtype=np.float64), T.tensor(a, dtype=np.float64)).item()
        assert got == pytest.approx(math.exp(5.0 * math.tanh(1.0)), rel=1e-9)
        assert got == pytest.approx(45.056, rel=1e-3)

    def test_strictly_increasing_and_bounded(self, rng):
        d = rng.normal(size=6)
        d /= np.linalg.norm(d)
        scales = np.linspace(-30, 30, 41)
        vals = [
            L.sim(T.tensor(s * d, dtype=np.float64), T.tensor(d, dtype=np.float64)).item()
            for s in scales
        ]
        assert all(v2 > v1 for v1, v2 in zip(vals, vals[1:]))
        assert all(math.exp(-5) < v < math.exp(5) for v in vals)

    def test_gradient(self, rng):
        a = rng.uniform(-2, 2, size=5)
        b = rng.uniform(-2, 2, size=5)
        gradcheck(lambda t: L.sim(t, T.tensor(b, dtype=np.float64)), a)
        gradcheck(lambda t: L.sim(T.tensor(a, dtype=np.float64), t), b)


class TestCalLoss:
    def test_single_frame_is_zero(self, rng):
        c = T.tensor(rng.normal(size=(1, 4)), dtype=np.float64)
        assert L.cal_loss(c, c).item() == pytest.approx(0.0, abs=1e-12)

    def test_orthonormal_closed_form(self):
        c = np.eye(3)
        got = L.cal_loss(T.tensor(c, dtype=np.float64), T.tensor(c, dtype=np.float64)).item()
        sim_m = math.exp(5.0 * math.tanh(1.0 / 5.0))
        want = -math.log(sim_m / (sim_m + 2.0))
        assert got == pytest.approx(want, rel=1e-9)

    def test_shuffle_control(self, rng):
        worse = 0
        for _ in range(100):
            c = rng.normal(size=(8, 6))
            c /= np.linalg.norm(c, axis=1, keepdims=True)
            matched = L.cal_loss(T.tensor(c, dtype=np.float64), T.tensor(c, dtype=np.float64)).item()
            perm = rng.permutation(8)
            while (perm == np.arange(8)).all():
                perm = rng.permutation(8)
            shuffled = L.cal_loss(
                T.tensor(c, dtype=np.float64), T.tensor(c[perm], dtype=np.float64)
            ).item()
            worse += shuffled >= matched
        assert worse >= 95

    def test_lower_bound_from_sim_range(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 10))
            c = rng.normal(size=(n, 5)) * 3
            s = rng.normal(size=(n, 5)) * 3
            val = L.cal_loss(T.tensor(c, dtype=np.float64), T.tensor(s, dtype=np.float64)).item()
            assert val >= L.cal_lower_bound(n) - 1e-9

    def test_length_mismatch(self):
        with pytest.raises(T.ShapeMismatchError):
            L.cal_loss(T.tensor(np.zeros((3, 2))), T.tensor(np.zeros((4, 2))))

    def test_gradient(self, rng):
        c = rng.uniform(-1, 1, size=(4, 3))
        s = rng.uniform(-1, 1, size=(4, 3))
        gradcheck(lambda t: L.cal_loss(t, T.tensor(s, dtype=np.float64)), c)
        gradcheck(lambda t: L.cal_loss(T.tensor(c, dtype=np.float64), t), s)

    def test_trainability_by_gradient_descent(self, rng):
        c = rng.normal(size=(6, 4))
        s = rng.normal(size=(6, 4))
        sv = s.copy()
        for _ in range(200):
            st = T.tensor(sv, requires_grad=True, dtype=np.float64)
            loss = L.cal_loss(T.tensor(c, dtype=np.float64), st)
            loss.backward()
            sv = sv - 0.5 * st.grad
        matched = np.sum(c * sv, axis=1).mean()
        mismatched = (c @ sv.T).mean()
        assert matched > mismatched


class TestSdtwCalLoss:
    def test_single_frame_zero(self, rng):
        c = T.tensor(rng.normal(size=(1, 4)), dtype=np.float64)
        s = T.tensor(rng.normal(size=(1, 4)), dtype=np.float64)
        assert L.sdtw_cal_loss(c, s).item() == pytest.approx(0.0, abs=1e-9)

    def test_diagonal_dominant_approaches_diagonal_mean(self, rng):
        c = np.eye(5) * 4.0
        cost = W.pairwise_cost(
            T.tensor(c, dtype=np.float64), T.tensor(c, dtype=np.float64), "sdtw_contrastive"
        )
        hard = W.dtw(cost.data)[1]
        soft = W.soft_dtw(cost, gamma=1e-3).item()
        assert soft == pytest.approx(hard, rel=1e-2)
        assert hard == pytest.approx(np.diag(cost.data).sum(), rel=1e-9)

    def test_gradient_reaches_both_branches(self, rng):
        c = T.tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
        s = T.tensor(rng.normal(size=(5, 4)), requires_grad=True, dtype=np.float64)
        L.sdtw_cal_loss(c, s).backward()
        assert np.abs(c.grad).sum() > 0
        assert np.abs(s.grad).sum() > 0

    def test_gradient_matches_finite_differences(self, rng):
        c = rng.uniform(-1, 1, size=(3, 4))
        s = rng.uniform(-1, 1, size=(4, 4))
        gradcheck(lambda t: L.sdtw_cal_loss(t, T.tensor(s, dtype=np.float64)), c, rtol=1e-3)
        gradcheck(lambda t: L.sdtw_cal_loss(T.tensor(c, dtype=np.float64), t), s, rtol=1e-3)


class TestSupervisedCalLoss:
    def test_diagonal_equals_plain_cal(self, rng):
        c = rng.normal(size=(5, 3))
        s = rng.normal(size=(5, 3))
        path = W.WarpPath(np.arange(5), np.arange(5), 5, 5)
        a = L.supervised_cal_loss(T.tensor(c, dtype=np.float64), T.tensor(s, dtype=np.float64), path)
        b = L.cal_loss(T.tensor(c, dtype=np.float64), T.tensor(s, dtype=np.float64))
        assert a.item() == pytest.approx(b.item(), rel=1e-12)

    def test_matches_manual_gather(self, rng):
        c = rng.normal(size=(4, 3))
        s = rng.normal(size=(6, 3))
        path = W.function_to_path([0, 2, 2, 5], 4, 6)
        got = L.supervised_cal_loss(
            T.tensor(c, dtype=np.float64), T.tensor(s, dtype=np.float64), path
        ).item()
        fmap = W.path_to_function(path)
        idx = np.clip(np.round(fmap), 0, 5).astype(int)
        want = L.cal_loss(T.tensor(c, dtype=np.float64), T.tensor(s[idx], dtype=np.float64)).item()
        assert got == pytest.approx(want, rel=1e-12)

    def test_inconsistent_path_rejected(self, rng):
        c = T.tensor(rng.normal(size=(4, 3)))
        s = T.tensor(rng.normal(size=(6, 3)))
        with pytest.raises(ValueError):
            L.supervised_cal_loss(c, s, W.WarpPath(np.arange(5), np.arange(5), 5, 5))


class TestTotalLoss:
    def test_zero_weights_reduce_to_recon(self):
        out = L.total_loss(1.5, 99.0, 99.0, L.LossWeights(lambda1=0.0, lambda2=0.0))
        assert out.item() == pytest.approx(1.5)

    def test_default_weights_arithmetic(self):
        out = L.total_loss(1.0, 2.0, 3.0, L.LossWeights())
        assert out.item() == pytest.approx(1.203, rel=1e-6)

    def test_linearity_in_components(self, rng):
        w = L.LossWeights(lambda1=0.3, lambda2=0.05)
        r, c, l2 = rng.uniform(0, 2, size=3)
        base = L.total_loss(float(r), float(c), float(l2), w).item()
        bumped = L.total_loss(float(r), float(c + 1), float(l2), w).item()
        assert bumped - base == pytest.approx(0.3, rel=1e-5)

    def test_gradient_is_weighted_sum(self, rng):
        x = rng.uniform(-1, 1, size=(3, 4))
        s = rng.uniform(-1, 1, size=(3, 4))
        w = L.LossWeights(lambda1=0.1, lambda2=0.001)

        def build(t):
            recon = L.recon_loss(t, T.tensor(s, dtype=np.float64))
            cal = L.cal_loss(t, T.tensor(s, dtype=np.float64))
            return L.total_loss(recon, cal, L.content_l2(t), w)

        xt = T.tensor(x, requires_grad=True, dtype=np.float64)
        build(xt).backward()
        parts = []
        for fn in (
            lambda t: L.recon_loss(t, T.tensor(s, dtype=np.float64)),
            lambda t: L.cal_loss(t, T.tensor(s, dtype=np.float64)),
            lambda t: L.content_l2(t),
        ):
            leaf = T.tensor(x, requires_grad=True, dtype=np.float64)
            fn(leaf).backward()
            parts.append(leaf.grad)
        want = parts[0] + 0.1 * parts[1] + 0.001 * parts[2]
        np.testing.assert_allclose(xt.grad, want, rtol=1e-10)


class TestMetricVariants:
    def test_cosine_uses_temperature(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        logits = L.clamped_similarity_logits(
            T.tensor(a, dtype=np.float64), T.tensor(b, dtype=np.float64), "cosine"
        ).data
        an = a / np.linalg.norm(a, axis=1, keepdims=True)
        bn = b / np.linalg.norm(b, axis=1, keepdims=True)
        np.testing.assert_allclose(logits, (an @ bn.T) / 0.2, rtol=1e-8)

    def test_cal_loss_with_all_metrics_finite(self, rng):
        c = T.tensor(rng.normal(size=(4, 3)), dtype=np.float64)
        s = T.tensor(rng.normal(size=(4, 3)), dtype=np.float64)
        for metric in ("product", "cosine", "euclidean"):
            assert np.isfinite(L.cal_loss(c, s, metric=metric).item())
