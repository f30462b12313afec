"""Tensor engine: forward values, broadcasting, and gradient oracles."""

import numpy as np
import pytest

from conftest import assert_grads_close, finite_difference, gradcheck
from nla import tensor as T


class TestForwardValues:
    def test_sigmoid_at_zero(self):
        assert T.sigmoid(T.tensor(0.0)).item() == pytest.approx(0.5)

    def test_relu_definition(self):
        assert T.relu(T.tensor(-3.2)).item() == 0.0
        assert T.relu(T.tensor(3.2)).item() == pytest.approx(3.2)

    def test_matmul_identity(self, rng):
        m = rng.normal(size=(3, 3))
        out = T.matmul(T.tensor(np.eye(3)), T.tensor(m))
        np.testing.assert_allclose(out.data, m, rtol=1e-6)

    def test_matmul_hand_arithmetic(self):
        out = T.matmul(T.tensor([[1.0, 2.0], [3.0, 4.0]]), T.tensor([[5.0], [6.0]]))
        np.testing.assert_allclose(out.data, [[17.0], [39.0]])

    def test_matmul_inner_mismatch(self):
        with pytest.raises(T.ShapeMismatchError) as ei:
            T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(ei.value) and "(4, 2)" in str(ei.value)

    def test_elementwise_shape_mismatch_names_both_shapes(self):
        with pytest.raises(T.ShapeMismatchError) as ei:
            T.add(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((4,))))
        assert "(2, 3)" in str(ei.value) and "(4,)" in str(ei.value)

    def test_softmax_uniform(self):
        out = T.softmax(T.tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), atol=1e-7)

    def test_softmax_overflow_stability(self):
        out = T.softmax(T.tensor([1000.0, 0.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-7)

    def test_softmax_rows_sum_to_one(self, rng):
        x = rng.normal(size=(5, 7)) * 10
        out = T.softmax(T.tensor(x, dtype=np.float64), axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(5), atol=1e-6)
        assert (out.data >= 0).all()

    def test_sum_full(self):
        assert T.reduce_sum(T.tensor([1.0, 2.0, 3.0])).item() == pytest.approx(6.0)

    def test_mean_axis(self):
        out = T.reduce_mean(T.tensor(np.ones((4, 5))), axis=1)
        np.testing.assert_allclose(out.data, np.ones(4))

    def test_softplus_matches_naive(self, rng):
        x = rng.normal(size=20) * 3
        out = T.softplus(T.tensor(x, dtype=np.float64))
        np.testing.assert_allclose(out.data, np.log1p(np.exp(x)), rtol=1e-12)

    def test_cumsum(self):
        out = T.cumsum(T.tensor([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out.data, [1.0, 3.0, 6.0])

    def test_forward_determinism(self, rng):
        x = rng.normal(size=(4, 4)).astype(np.float32)
        a = T.softmax(T.matmul(T.tensor(x), T.tensor(x)), axis=-1).data
        b = T.softmax(T.matmul(T.tensor(x), T.tensor(x)), axis=-1).data
        assert (a == b).all()


class TestGradients:
    def test_tanh_matches_finite_difference(self):
        x = T.tensor(0.7, requires_grad=True, dtype=np.float64)
        y = T.tanh(x)
        y.backward()
        fd = finite_difference(lambda a: np.tanh(a).sum(), np.array(0.7), h=1e-5)
        assert_grads_close(x.grad, fd, rtol=1e-6)

    def test_matmul_gradient(self, rng):
        a = rng.uniform(-2, 2, size=(3, 4))
        b = rng.uniform(-2, 2, size=(4, 2))
        gradcheck(lambda t: T.reduce_sum(T.matmul(t, T.tensor(b, dtype=np.float64))), a)
        gradcheck(lambda t: T.reduce_sum(T.matmul(T.tensor(a, dtype=np.float64), t)), b)

    def test_batched_matmul_gradient(self, rng):
        a = rng.uniform(-2, 2, size=(2, 3, 4))
        b = rng.uniform(-2, 2, size=(4, 5))
        gradcheck(lambda t: T.reduce_sum(T.square(T.matmul(t, T.tensor(b, dtype=np.float64)))), a)
        gradcheck(lambda t: T.reduce_sum(T.square(T.matmul(T.tensor(a, dtype=np.float64), t))), b)

    def test_softmax_jvp(self, rng):
        x = rng.uniform(-2, 2, size=(3, 5))
        w = rng.normal(size=(3, 5))
        gradcheck(
            lambda t: T.reduce_sum(T.mul(T.softmax(t, axis=1), T.tensor(w, dtype=np.float64))),
            x,
            rtol=1e-5,
        )

    def test_elementwise_gradients(self, rng):
        ops = [T.exp, T.tanh, T.sigmoid, T.square, T.softplus, T.neg]
        for op in ops:
            x = rng.uniform(-2, 2, size=7)
            gradcheck(lambda t, op=op: T.reduce_sum(op(t)), x)
        x = rng.uniform(0.1, 2, size=7)
        gradcheck(lambda t: T.reduce_sum(T.log(t)), x)
        gradcheck(lambda t: T.reduce_sum(T.sqrt(t)), x)

    def test_broadcast_gradients(self, rng):
        a = rng.uniform(-2, 2, size=(4, 3))
        b = rng.uniform(-2, 2, size=(3,))
        gradcheck(lambda t: T.reduce_sum(T.square(T.mul(t, T.tensor(b, dtype=np.float64)))), a)
        gradcheck(lambda t: T.reduce_sum(T.square(T.mul(T.tensor(a, dtype=np.float64), t))), b)
        gradcheck(lambda t: T.reduce_sum(T.square(T.div(T.tensor(a, dtype=np.float64), T.add(t, 3.0)))), b)

    def test_reduce_gradients(self, rng):
        x = rng.uniform(-2, 2, size=(4, 5))
        gradcheck(lambda t: T.reduce_sum(T.square(T.reduce_mean(t, axis=1))), x)
        gradcheck(lambda t: T.reduce_sum(T.square(T.reduce_sum(t, axis=0))), x)

    def test_max_gradient_away_from_ties(self, rng):
        x = rng.permutation(np.linspace(-2, 2, 20)).reshape(4, 5)
        gradcheck(lambda t: T.reduce_sum(T.square(T.reduce_max(t, axis=1))), x)

    def test_cumsum_gradient(self, rng):
        x = rng.uniform(-2, 2, size=(3, 6))
        gradcheck(lambda t: T.reduce_sum(T.square(T.cumsum(t, axis=1))), x)

    def test_getitem_take_concat_gradients(self, rng):
        x = rng.uniform(-2, 2, size=(5, 3))
        gradcheck(lambda t: T.reduce_sum(T.square(t[1:4, :2])), x)
        gradcheck(lambda t: T.reduce_sum(T.square(T.take(t, [0, 2, 2, 4], axis=0))), x)
        gradcheck(lambda t: T.reduce_sum(T.square(T.concat([t, T.mul(t, 2.0)], axis=1))), x)

    def test_transpose_reshape_gradients(self, rng):
        x = rng.uniform(-2, 2, size=(2, 3, 4))
        gradcheck(lambda t: T.reduce_sum(T.square(T.transpose(t, (2, 0, 1)))), x)
        gradcheck(lambda t: T.reduce_sum(T.square(T.reshape(t, (6, 4)))), x)

    def test_logsumexp_gradient(self, rng):
        x = rng.uniform(-2, 2, size=(4, 6))
        gradcheck(lambda t: T.reduce_sum(T.logsumexp(t, axis=1)), x)

    def test_maximum_with_gradient(self, rng):
        x = rng.uniform(-2, 2, size=11)
        x = x[np.abs(x - 0.5) > 1e-2]  # stay away from the kink
        gradcheck(lambda t: T.reduce_sum(T.square(T.maximum_with(t, 0.5))), x)

    def test_sigmoid_of_linear_map(self, rng):
        w = rng.uniform(-2, 2, size=(3, 4))
        x = rng.uniform(-2, 2, size=(4, 2))
        gradcheck(
            lambda t: T.reduce_sum(T.sigmoid(T.matmul(t, T.tensor(x, dtype=np.float64)))),
            w,
            rtol=1e-5,
        )


class TestBackwardMechanics:
    def test_analytic_square_grad(self):
        x = T.tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        T.reduce_sum(T.square(x)).backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            T.square(x).backward()

    def test_backward_twice_without_retain_errors(self):
        x = T.tensor([1.0, 2.0], requires_grad=True)
        loss = T.reduce_sum(T.square(x))
        loss.backward()
        with pytest.raises(T.GraphFreedError):
            loss.backward()

    def test_retained_tape_doubles_grad(self):
        x = T.tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        loss = T.reduce_sum(T.square(x))
        loss.backward(retain_graph=True)
        first = x.grad.copy()
        loss.backward(retain_graph=True)
        np.testing.assert_allclose(x.grad, 2.0 * first)

    def test_disconnected_tensor_grad_stays_zero(self):
        x = T.tensor([1.0], requires_grad=True)
        y = T.tensor([1.0], requires_grad=True)
        T.reduce_sum(T.square(x)).backward()
        assert y.grad is None

    def test_grad_populated_on_intermediates(self):
        x = T.tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        mid = T.square(x)
        T.reduce_sum(mid).backward()
        np.testing.assert_allclose(mid.grad, [1.0, 1.0])
        assert np.isfinite(x.grad).all()

    def test_no_grad_suppresses_recording(self):
        x = T.tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = T.square(x)
        assert not y.requires_grad

    def test_grad_accumulates_across_reuse(self):
        x = T.tensor([3.0], requires_grad=True, dtype=np.float64)
        loss = T.add(T.square(x), T.mul(x, 2.0))
        T.reduce_sum(loss).backward()
        np.testing.assert_allclose(x.grad, [8.0])  # 2x + 2

    def test_float32_default_dtype(self):
        t = T.tensor([1, 2, 3])
        assert t.dtype == np.float32
