"""Training objectives: reconstruction, clamped-similarity contrastive
alignment, its soft-DTW and supervised variants, and the weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import warp as W
from .tensor import Tensor

SIM_CLAMP = 5.0  # inner products are softly clamped to [-5, 5] by 5*tanh(x/5)
SDTW_GAMMA = 1.0
COSINE_TEMPERATURE = 0.2


@dataclass
class LossWeights:
    """Weights of the alignment and content-regularization terms."""

    lambda1: float = 0.1
    lambda2: float = 0.001


def recon_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if x.shape != x_hat.shape:
        raise T.ShapeMismatchError("recon_loss", x.shape, x_hat.shape)
    return T.reduce_mean(T.square(T.sub(x, x_hat)))


def sim(a: Tensor, b: Tensor) -> Tensor:
    """Similarity of two vectors: exp(5 * tanh(<a, b> / 5)).

    Strictly increasing in the inner product and bounded in (e^-5, e^5);
    the soft clamp keeps the contrastive objective stable.
    """
    if not isinstance(a, Tensor):
        a = T.tensor(a)
    if not isinstance(b, Tensor):
        b = T.tensor(b)
    if a.shape != b.shape:
        raise T.ShapeMismatchError("sim", a.shape, b.shape)
    inner = T.reduce_sum(T.mul(a, b), axis=-1)
    return T.exp(T.scale(T.tanh(T.scale(inner, 1.0 / SIM_CLAMP)), SIM_CLAMP))


def clamped_similarity_logits(a: Tensor, b: Tensor, metric: str = "product") -> Tensor:
    """log-similarity matrix [..., L_A, L_B]: log sim(a_i, b_j).

    ``product`` yields 5*tanh(<a_i, b_j>/5); ``cosine`` divides the
    cosine similarity by a fixed temperature; ``euclidean`` negates the
    L2 distance.
    """
    if metric == "product":
        inner = T.matmul(a, W._swap_last(b))
        return T.scale(T.tanh(T.scale(inner, 1.0 / SIM_CLAMP)), SIM_CLAMP)
    if metric == "cosine":
        na = _l2_normalize(a)
        nb = _l2_normalize(b)
        return T.scale(T.matmul(na, W._swap_last(nb)), 1.0 / COSINE_TEMPERATURE)
    if metric == "euclidean":
        return T.neg(W.pairwise_cost(a, b, "euclidean"))
    raise ValueError(f"unknown similarity metric {metric!r}")


def _l2_normalize(t: Tensor) -> Tensor:
    norm = T.sqrt(T.maximum_with(T.reduce_sum(T.square(t), axis=-1, keepdims=True), 1e-12))
    return T.div(t, norm)


def cal_loss(c_target: Tensor, s_warped: Tensor, metric: str = "product") -> Tensor:
    """Contrastive alignment loss between target content frames and the
    warped source surrogate.

    Per warped frame t the matched similarity sim(c_t, s_t) is contrasted
    against the pool over the *target content* sequence:

        -mean_t log[ sim(c_t, s_t) / sum_k sim(c_k, s_t) ]

    computed in log space. Inputs are [..., L, d] with equal lengths; the
    mean runs over frames and any leading batch dims.
    """
    if c_target.shape != s_warped.shape:
        raise T.ShapeMismatchError("cal_loss", c_target.shape, s_warped.shape)
    logits = clamped_similarity_logits(c_target, s_warped, metric)  # [..., k, t]
    matched = _diag_last2(logits)
    pooled = T.logsumexp(logits, axis=-2)  # over target content index k, per frame t
    return T.reduce_mean(T.sub(pooled, matched))


def _diag_last2(t: Tensor) -> Tensor:
    n = t.shape[-1]
    if t.shape[-2] != n:
        raise T.ShapeMismatchError("diagonal", t.shape, t.shape)
    flat = T.reshape(t, t.shape[:-2] + (n * n,))
    return T.take(flat, np.arange(n) * (n + 1), axis=-1)


def sdtw_cal_loss(c_target: Tensor, s_source: Tensor, gamma: float = SDTW_GAMMA) -> Tensor:
    """Soft-DTW over the contrastive distance matrix, per target frame.

    Used when no explicit warping model is available: the soft minimum
    over monotone paths replaces the expected warp.
    """
    cost = W.pairwise_cost(c_target, s_source, "sdtw_contrastive")
    value = W.soft_dtw(cost, gamma=gamma)
    return T.scale(T.reduce_mean(value), 1.0 / c_target.shape[-2])


def supervised_cal_loss(c_target: Tensor, s_source: Tensor, path: W.WarpPath) -> Tensor:
    """Contrastive alignment loss after hard-warping the source by a
    known path (many-to-one matches averaged, then rounded to a gather).
    """
    if path.target_len != c_target.shape[-2] or path.source_len != s_source.shape[-2]:
        raise ValueError(
            f"path covers ({path.target_len}, {path.source_len}) but sequences are "
            f"({c_target.shape[-2]}, {s_source.shape[-2]})"
        )
    fmap = W.path_to_function(path, direction="target")
    idx = np.clip(np.round(fmap), 0, path.source_len - 1).astype(np.intp)
    s_warped = T.take(s_source, idx, axis=-2)
    return cal_loss(c_target, s_warped)


def content_l2(c: Tensor) -> Tensor:
    """Mean squared content activation (capacity regularizer)."""
    return T.reduce_mean(T.square(c))


def total_loss(recon: Tensor | float, cal: Tensor | float, l2: Tensor | float, weights: LossWeights) -> Tensor:
    """recon + lambda1 * cal + lambda2 * l2."""
    out = recon if isinstance(recon, Tensor) else T.tensor(recon)
    if weights.lambda1 != 0.0:
        out = T.add(out, T.scale(cal if isinstance(cal, Tensor) else T.tensor(cal), weights.lambda1))
    if weights.lambda2 != 0.0:
        out = T.add(out, T.scale(l2 if isinstance(l2, Tensor) else T.tensor(l2), weights.lambda2))
    return out


def cal_lower_bound(length: int) -> float:
    """Smallest achievable per-frame contrastive value given the clamp."""
    return float(np.log(1.0 + (length - 1) * np.exp(-2.0 * SIM_CLAMP)))
