"""Alignment mathematics: monotone Gaussian alignment distributions,
expectation warping, classic and soft dynamic time warping, and warp-path
utilities.

Convention: alignment runs source -> target. A distribution holds, for
each of ``L_A`` target frames, a Gaussian over the ``L_B`` source frames
(mean ``mu`` in source-frame units, variance ``sigma2``). Source frames
are indexed 0..L_B-1 internally. Leading batch dimensions are supported
everywhere the math allows it ("..." below).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SIGMA2_FLOOR = 1e-6  # source-frames^2; keeps alignment rows non-degenerate


@dataclass
class AlignmentDistribution:
    """Per-target-frame Gaussian over source frames.

    ``mu``/``sigma2`` have shape [..., L_A]; ``mu`` is non-decreasing
    along the last axis and lies in [0, source_len]; ``sigma2`` > 0.
    """

    mu: Tensor
    sigma2: Tensor
    source_len: int

    @property
    def target_len(self) -> int:
        return self.mu.shape[-1]

    def check(self, atol: float = 1e-5) -> None:
        mu = self.mu.data
        if not (np.diff(mu, axis=-1) >= -atol).all():
            raise ValueError("alignment means must be non-decreasing")
        if mu.min() < -atol or mu.max() > self.source_len + atol:
            raise ValueError(f"alignment means must lie in [0, {self.source_len}]")
        if (self.sigma2.data <= 0).any():
            raise ValueError("alignment variances must be positive")


@dataclass
class WarpPath:
    """Discrete monotone correspondence between two frame index sequences.

    Each step advances the target index, the source index, or both by
    exactly one; the path connects (0, 0) to (target_len-1, source_len-1).
    """

    target_idx: np.ndarray
    source_idx: np.ndarray
    target_len: int
    source_len: int

    def __post_init__(self):
        self.target_idx = np.asarray(self.target_idx, dtype=np.intp)
        self.source_idx = np.asarray(self.source_idx, dtype=np.intp)

    def check(self) -> None:
        ti, si = self.target_idx, self.source_idx
        if len(ti) != len(si) or len(ti) == 0:
            raise ValueError("warp path index sequences must be non-empty and equal length")
        if ti[0] != 0 or si[0] != 0 or ti[-1] != self.target_len - 1 or si[-1] != self.source_len - 1:
            raise ValueError("warp path must cover (0,0) to (L_A-1, L_B-1)")
        dt, ds = np.diff(ti), np.diff(si)
        if not ((dt >= 0) & (dt <= 1) & (ds >= 0) & (ds <= 1) & ((dt + ds) >= 1)).all():
            raise ValueError("warp path steps must advance target, source, or both by exactly 1")

    def __len__(self) -> int:
        return len(self.target_idx)


def gaussian_alignment(u_dmu: Tensor, u_sigma: Tensor, source_len: int) -> AlignmentDistribution:
    """Build a monotone alignment distribution from free parameters.

    Means accumulate non-negative jumps, each a sigmoid-squashed fraction
    of the remaining source length:

        mu_i = mu_{i-1} + (L_B - mu_{i-1}) * sigmoid(u_dmu_i),  mu_0 = 0

    evaluated in closed form as ``mu_i = L_B * (1 - prod_k sigmoid(-u_k))``
    via a cumulative sum of ``-softplus(u)`` in log space, which is exact
    and stable for arbitrarily large |u|. Variances are ``exp(u_sigma)``.
    """
    if not isinstance(u_dmu, Tensor):
        u_dmu = T.tensor(u_dmu)
    if not isinstance(u_sigma, Tensor):
        u_sigma = T.tensor(u_sigma)
    if u_dmu.shape != u_sigma.shape:
        raise T.ShapeMismatchError("gaussian_alignment", u_dmu.shape, u_sigma.shape)
    # log(1 - sigmoid(u)) == -softplus(u)
    log_stay = T.neg(T.softplus(u_dmu))
    mu = T.scale(T.sub(1.0, T.exp(T.cumsum(log_stay, axis=-1))), float(source_len))
    sigma2 = T.exp(u_sigma)
    return AlignmentDistribution(mu=mu, sigma2=sigma2, source_len=int(source_len))


def alignment_matrix(ad: AlignmentDistribution) -> Tensor:
    """Row-stochastic [..., L_A, L_B] matrix of normalized Gaussian weights.

    Row i carries exp(-(j - mu_i)^2 / (2 sigma2_i)) over integer source
    frames j, normalized to sum to one. Variances are floored at
    ``SIGMA2_FLOOR`` to avoid degenerate rows.
    """
    grid = T.constant(np.arange(ad.source_len), dtype=ad.mu.data.dtype)
    mu = T.reshape(ad.mu, ad.mu.shape + (1,))
    sigma2 = T.maximum_with(T.reshape(ad.sigma2, ad.sigma2.shape + (1,)), SIGMA2_FLOOR)
    logits = T.neg(T.div(T.square(T.sub(grid, mu)), T.scale(sigma2, 2.0)))
    return T.softmax(logits, axis=-1)


def warp_apply(p: Tensor, z_source: Tensor) -> Tensor:
    """Expected warp: out_i = sum_j P[i, j] * z_source[j].

    ``p`` is [..., L_A, L_B] row-stochastic, ``z_source`` [..., L_B, d].
    """
    if p.shape[-1] != z_source.shape[-2]:
        raise T.ShapeMismatchError("warp_apply", p.shape, z_source.shape)
    return T.matmul(p, z_source)


def mode_path(ad: AlignmentDistribution, rounded: bool = False) -> np.ndarray:
    """Per-target source positions from the distribution centers.

    Continuous by default; ``rounded`` clamps round(mu) into the valid
    source index range.
    """
    mu = np.asarray(ad.mu.data, dtype=np.float64)
    if rounded:
        return np.clip(np.round(mu), 0, ad.source_len - 1)
    return mu


# -- dynamic time warping ---------------------------------------------------


def _as_cost_array(cost) -> np.ndarray:
    c = cost.data if isinstance(cost, Tensor) else np.asarray(cost)
    if c.ndim != 2 or c.size == 0:
        raise ValueError(f"cost matrix must be non-empty and 2-D, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix entries must be finite")
    return np.asarray(c, dtype=np.float64)


def dtw(cost) -> tuple[WarpPath, float]:
    """Classic DTW over steps {(1,0), (0,1), (1,1)} with no window.

    Ties prefer the diagonal predecessor, then the source advance.
    Returns one optimal path and the accumulated minimal cost. The DP is
    evaluated along anti-diagonal wavefronts so only the traceback runs
    in Python.
    """
    c = _as_cost_array(cost)
    n, m = c.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    # choice codes: 0 = diagonal, 1 = source advance (j-1), 2 = target advance (i-1)
    choice = np.zeros((n, m), dtype=np.uint8)
    for d in range(2, n + m + 2):
        lo = max(1, d - m)
        hi = min(n, d - 1)
        if lo > hi:
            continue
        i = np.arange(lo, hi + 1)
        j = d - i
        cand = np.stack([acc[i - 1, j - 1], acc[i, j - 1], acc[i - 1, j]])
        pick = np.argmin(cand, axis=0)  # first minimum wins: diag, then source
        acc[i, j] = c[i - 1, j - 1] + cand[pick, np.arange(len(i))]
        choice[i - 1, j - 1] = pick
    total = float(acc[n, m])

    ti, si = [n - 1], [m - 1]
    i, j = n - 1, m - 1
    while i > 0 or j > 0:
        step = choice[i, j]
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        elif step == 0:
            i -= 1
            j -= 1
        elif step == 1:
            j -= 1
        else:
            i -= 1
        ti.append(i)
        si.append(j)
    path = WarpPath(np.array(ti[::-1]), np.array(si[::-1]), n, m)
    path.check()
    return path, total


def _softmin3(a, b, c, gamma: float):
    stacked = np.stack([a, b, c])
    m = stacked.min(axis=0)
    # exp(-(inf - inf)) cannot occur: m is -inf only where all three are
    with np.errstate(invalid="ignore"):
        z = np.exp(-(stacked - m) / gamma)
    out = m - gamma * np.log(np.where(np.isfinite(m), z.sum(axis=0), 1.0))
    return np.where(np.isfinite(m), out, m)


def soft_dtw(cost, gamma: float) -> Tensor:
    """Differentiable soft-DTW value of a cost matrix.

    ``cost`` is a Tensor [..., L_A, L_B]; the result has the leading
    shape with both trailing axes reduced. The forward pass runs the
    soft-min DP; the gradient w.r.t. the costs is the expected alignment
    matrix from the standard reverse DP, wired into autodiff so costs may
    themselves carry gradients.
    """
    if gamma <= 0:
        raise ValueError(f"soft_dtw gamma must be positive, got {gamma}")
    if not isinstance(cost, Tensor):
        cost = T.tensor(cost)
    if cost.ndim < 2 or cost.shape[-1] == 0 or cost.shape[-2] == 0:
        raise ValueError(f"cost matrix must be non-empty, got shape {cost.shape}")
    c = np.asarray(cost.data, dtype=np.float64)
    lead = c.shape[:-2]
    n, m = c.shape[-2:]
    c2 = c.reshape((-1, n, m))
    batch = c2.shape[0]

    r = np.full((batch, n + 2, m + 2), np.inf)
    r[:, 0, 0] = 0.0
    for d in range(2, n + m + 2):
        lo = max(1, d - m)
        hi = min(n, d - 1)
        if lo > hi:
            continue
        i = np.arange(lo, hi + 1)
        j = d - i
        r[:, i, j] = c2[:, i - 1, j - 1] + _softmin3(
            r[:, i - 1, j - 1], r[:, i, j - 1], r[:, i - 1, j], gamma
        )
    value = r[:, n, m].copy()

    def vjp(g):
        e = _soft_dtw_expected_alignment(c2, r, gamma)
        g2 = np.asarray(g, dtype=np.float64).reshape((batch, 1, 1))
        return ((g2 * e).reshape(c.shape).astype(cost.data.dtype),)

    return T.autodiff_node(value.reshape(lead).astype(cost.data.dtype), (cost,), vjp)


def _soft_dtw_expected_alignment(c2: np.ndarray, r: np.ndarray, gamma: float) -> np.ndarray:
    """Reverse DP giving d(value)/d(cost): the expected alignment matrix."""
    batch, n, m = c2.shape
    d_pad = np.zeros((batch, n + 2, m + 2))
    d_pad[:, 1 : n + 1, 1 : m + 1] = c2
    r = r.copy()
    r[:, :, m + 1] = -np.inf
    r[:, n + 1, :] = -np.inf
    r[:, n + 1, m + 1] = r[:, n, m]
    e = np.zeros((batch, n + 2, m + 2))
    e[:, n + 1, m + 1] = 1.0
    with np.errstate(invalid="ignore", over="ignore"):
        for d in range(n + m, 1, -1):
            lo = max(1, d - m)
            hi = min(n, d - 1)
            if lo > hi:
                continue
            i = np.arange(lo, hi + 1)
            j = d - i
            a = np.exp((r[:, i + 1, j] - r[:, i, j] - d_pad[:, i + 1, j]) / gamma)
            b = np.exp((r[:, i, j + 1] - r[:, i, j] - d_pad[:, i, j + 1]) / gamma)
            cc = np.exp((r[:, i + 1, j + 1] - r[:, i, j] - d_pad[:, i + 1, j + 1]) / gamma)
            e[:, i, j] = (
                np.nan_to_num(a, nan=0.0) * e[:, i + 1, j]
                + np.nan_to_num(b, nan=0.0) * e[:, i, j + 1]
                + np.nan_to_num(cc, nan=0.0) * e[:, i + 1, j + 1]
            )
    return e[:, 1 : n + 1, 1 : m + 1]


# -- path utilities ----------------------------------------------------------


def path_to_function(path: WarpPath, direction: str = "target", reduce: str = "mean") -> np.ndarray:
    """Collapse a warp path into a per-frame map.

    ``direction="target"`` returns, for each target frame, the matched
    source frames reduced by ``reduce`` ("mean" averages many-to-one
    matches, "first" takes the earliest). ``direction="source"`` swaps
    the roles. The result is monotone non-decreasing.
    """
    if direction == "target":
        keys, vals, length = path.target_idx, path.source_idx, path.target_len
    elif direction == "source":
        keys, vals, length = path.source_idx, path.target_idx, path.source_len
    else:
        raise ValueError(f"unknown direction {direction!r}")
    if reduce == "mean":
        sums = np.bincount(keys, weights=vals, minlength=length)
        counts = np.bincount(keys, minlength=length)
        return sums / counts
    if reduce == "first":
        out = np.full(length, -1.0)
        for k, v in zip(keys[::-1], vals[::-1]):
            out[k] = v
        return out
    raise ValueError(f"unknown reduce {reduce!r}")


def function_to_path(frame_map, target_len: int, source_len: int) -> WarpPath:
    """Build a valid warp path passing through a monotone frame map.

    ``frame_map`` gives, per target frame, an (approximate) source frame;
    values are rounded, clamped, and made monotone, then connected with
    unit steps so the result satisfies the warp-path invariants.
    """
    fm = np.clip(np.round(np.asarray(frame_map, dtype=np.float64)), 0, source_len - 1)
    fm = np.maximum.accumulate(fm).astype(np.intp)
    if len(fm) != target_len:
        raise ValueError(f"frame map length {len(fm)} != target_len {target_len}")
    ti, si = [0], [0]
    j = 0
    for j_next in range(1, fm[0] + 1):
        ti.append(0)
        si.append(j_next)
        j = j_next
    for i in range(1, target_len):
        step = fm[i] - j
        if step == 0:
            ti.append(i)
            si.append(j)
        else:
            ti.append(i)
            si.append(j + 1)
            for jj in range(j + 2, fm[i] + 1):
                ti.append(i)
                si.append(jj)
            j = fm[i]
    for jj in range(j + 1, source_len):
        ti.append(target_len - 1)
        si.append(jj)
    path = WarpPath(np.array(ti), np.array(si), target_len, source_len)
    path.check()
    return path


# -- pairwise costs -----------------------------------------------------------


def pairwise_cost(a: Tensor, b: Tensor, metric: str = "euclidean") -> Tensor:
    """Frame-pair cost matrix [L_A, L_B] between two feature sequences.

    ``euclidean`` is the L2 distance, ``product`` the negative inner
    product, and ``sdtw_contrastive`` the per-source-frame negative
    log-softmax of clamped similarities over the target sequence (its
    columns exponentiate to a distribution over target frames).
    """
    if not isinstance(a, Tensor):
        a = T.tensor(a)
    if not isinstance(b, Tensor):
        b = T.tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise T.ShapeMismatchError("pairwise_cost", a.shape, b.shape)
    bt = _swap_last(b)
    if metric == "euclidean":
        prod = T.matmul(a, bt)
        sq_a = T.reduce_sum(T.square(a), axis=-1, keepdims=True)
        sq_b = _swap_last(T.reduce_sum(T.square(b), axis=-1, keepdims=True))
        sq = T.sub(T.add(sq_a, sq_b), T.scale(prod, 2.0))
        return T.sqrt(T.maximum_with(sq, 1e-12))
    if metric == "product":
        return T.neg(T.matmul(a, bt))
    if metric == "sdtw_contrastive":
        from .losses import clamped_similarity_logits

        logits = clamped_similarity_logits(a, b)  # [..., L_A, L_B]
        return T.sub(T.logsumexp(logits, axis=-2, keepdims=True), logits)
    raise ValueError(f"unknown metric {metric!r}")


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return T.transpose(t, tuple(axes))
