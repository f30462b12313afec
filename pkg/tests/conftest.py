"""Shared test helpers: finite-difference gradient oracle and fixtures."""

import numpy as np
import pytest

from nla import tensor as T


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def assert_grads_close(g_ad: np.ndarray, g_fd: np.ndarray, rtol: float = 1e-4, floor: float = 1e-8):
    """Elementwise relative error < rtol with an absolute floor."""
    g_ad = np.asarray(g_ad, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    assert g_ad.shape == g_fd.shape
    diff = np.abs(g_ad - g_fd)
    tol = np.maximum(floor, rtol * np.maximum(np.abs(g_ad), np.abs(g_fd)))
    bad = diff > tol
    assert not bad.any(), (
        f"gradient mismatch at {bad.sum()}/{bad.size} entries; "
        f"worst |ad-fd|={diff.max():.3e}, ad={g_ad.reshape(-1)[diff.argmax()]:.6e}, "
        f"fd={g_fd.reshape(-1)[diff.argmax()]:.6e}"
    )


def gradcheck(build_loss, x: np.ndarray, rtol: float = 1e-4, h: float = 1e-5):
    """Check autodiff gradient of ``build_loss`` (np array -> Tensor scalar) at x.

    The function is re-run on perturbed copies of x for the finite
    differences, so it must be deterministic in x.
    """
    x = np.asarray(x, dtype=np.float64)
    leaf = T.tensor(x, requires_grad=True, dtype=np.float64)
    loss = build_loss(leaf)
    loss.backward()
    assert leaf.grad is not None, "no gradient reached the input"

    def eval_fn(arr):
        with T.no_grad():
            return build_loss(T.tensor(arr, dtype=np.float64)).item()

    g_fd = finite_difference(eval_fn, x, h=h)
    assert_grads_close(leaf.grad, g_fd, rtol=rtol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
