"""Neural layers for the sequence models: 1D convolutions (stride/dilation
with same-style padding), length-doubling transposed convolutions, linear
maps, batch/layer normalization, dropout, multi-head attention, and
learnable position/sequence embeddings.

All sequence tensors are laid out [batch, length, channels]. Layers are
pure functions of (input, parameters, rng); parameters are discovered by
walking module attributes in insertion order, which keeps checkpoint
layouts stable.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


# -- parameter plumbing -------------------------------------------------------


class Module:
    """Minimal layer base: attribute-ordered parameter/buffer discovery
    and a train/eval mode flag."""

    def __init__(self):
        self.training = True

    def named_params(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_params(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{path}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{path}.{i}.")
            elif isinstance(value, np.ndarray) and name.startswith("running_"):
                yield path, value

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self):
        for m in self.modules():
            m.training = True
        return self

    def eval(self):
        for m in self.modules():
            m.training = False
        return self

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()


class ParamStore:
    """Stable-ordered view of a module tree's parameters and buffers."""

    def __init__(self, module: Module, seed: int | None = None):
        self.module = module
        self.seed = seed
        self.params = dict(module.named_params())
        names = list(self.params)
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter paths in module tree")

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self.module.named_buffers())

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _param(data: np.ndarray) -> Tensor:
    return T.tensor(data, requires_grad=True)


def cast_params(module: Module, dtype) -> None:
    """In-place dtype switch of all parameters (64-bit gradient checks)."""
    for _, p in module.named_params():
        p.data = p.data.astype(dtype)


# -- conv primitives -----------------------------------------------------------


def same_padding(length: int, kernel: int, stride: int, dilation: int) -> tuple[int, int]:
    """Near-symmetric zero padding so the output length is ceil(L/stride)."""
    out_len = -(-length // stride)
    total = max(0, (out_len - 1) * stride + (kernel - 1) * dilation + 1 - length)
    left = total // 2
    return left, total - left


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    """1D convolution of [B, L, C_in] with weight [k, C_in, C_out].

    Padding keeps L_out = ceil(L / stride) exactly. Forward and adjoint
    each run as a single matrix product over the unfolded input.
    """
    k, c_in, c_out = weight.shape
    if x.shape[-1] != c_in:
        raise T.ShapeMismatchError("conv1d", x.shape, weight.shape)
    b, length = x.shape[0], x.shape[1]
    out_len = -(-length // stride)
    pl, pr = same_padding(length, k, stride, dilation)
    x_pad = np.pad(x.data, ((0, 0), (pl, pr), (0, 0)))
    hi = (out_len - 1) * stride + 1
    w_data = weight.data.astype(x.data.dtype)

    def tap(t):
        return x_pad[:, t * dilation : t * dilation + hi : stride, :]

    out = tap(0) @ w_data[0]
    for t in range(1, k):
        out += tap(t) @ w_data[t]
    out += bias.data.astype(x.data.dtype)
    w_dtype = weight.data.dtype
    pad_len = x_pad.shape[1]

    def vjp(g):
        gw = np.empty((k, c_in, c_out), dtype=np.float64 if g.dtype == np.float64 else np.float32)
        gx_pad = np.zeros((b, pad_len, c_in), dtype=g.dtype)
        for t in range(k):
            gw[t] = np.tensordot(tap(t), g, axes=([0, 1], [0, 1]))
            gx_pad[:, t * dilation : t * dilation + hi : stride, :] += g @ w_data[t].T
        gb = g.sum(axis=(0, 1))
        return gx_pad[:, pl : pl + length, :], gw.astype(w_dtype), gb.astype(w_dtype)

    return T.autodiff_node(out, (x, weight, bias), vjp)


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Length-expanding transposed convolution: [B, L, C_in] -> [B, k*L, C_out].

    Kernel taps tile the output without overlap (stride equals the kernel
    size), so two kernel-2 layers turn L latent frames into 4L.
    """
    k, c_in, c_out = weight.shape
    if x.shape[-1] != c_in:
        raise T.ShapeMismatchError("conv_transpose1d", x.shape, weight.shape)
    b, length = x.shape[0], x.shape[1]
    # [C_in, k*C_out] so each input frame emits k output frames at once
    w_mat = weight.data.astype(x.data.dtype).transpose(1, 0, 2).reshape(c_in, k * c_out)
    x2 = x.data.reshape(b * length, c_in)
    out = (x2 @ w_mat).reshape(b, length * k, c_out) + bias.data.astype(x.data.dtype)
    w_dtype = weight.data.dtype

    def vjp(g):
        g2 = g.reshape(b * length, k * c_out)
        gx = (g2 @ w_mat.T).reshape(b, length, c_in)
        gw = (x2.T @ g2).reshape(c_in, k, c_out).transpose(1, 0, 2)
        gb = g.sum(axis=(0, 1))
        return gx, gw.astype(w_dtype), gb.astype(w_dtype)

    return T.autodiff_node(out, (x, weight, bias), vjp)


# -- layers ---------------------------------------------------------------------


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, dilation=1, *, rng):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.dilation = dilation
        fan_in = kernel * in_channels
        self.weight = _param(kaiming_uniform(rng, (kernel, in_channels, out_channels), fan_in))
        self.bias = _param(np.zeros(out_channels, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.dilation)


class ConvTranspose1d(Module):
    def __init__(self, in_channels, out_channels, kernel=2, *, rng):
        super().__init__()
        self.kernel = kernel
        fan_in = in_channels
        self.weight = _param(kaiming_uniform(rng, (kernel, in_channels, out_channels), fan_in))
        self.bias = _param(np.zeros(out_channels, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose1d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, in_features, out_features, *, rng):
        super().__init__()
        self.weight = _param(kaiming_uniform(rng, (in_features, out_features), in_features))
        self.bias = _param(np.zeros(out_features, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


def _normalize_affine(x: Tensor, scale: Tensor, shift: Tensor, mean, var, eps, axes) -> Tensor:
    """Shared fused kernel: out = (x - mean)/sqrt(var + eps) * scale + shift.

    ``mean``/``var`` are plain arrays (batch or running statistics). When
    they were computed from x over ``axes``, the adjoint includes the
    statistic terms; pass ``axes=None`` for frozen statistics.
    """
    dt = x.data.dtype
    inv = 1.0 / np.sqrt(var.astype(dt) + dt.type(eps))
    xhat = (x.data - mean.astype(dt)) * inv
    out = xhat * scale.data + shift.data

    def vjp(g):
        gscale = (g * xhat).sum(axis=(0, 1) if xhat.ndim == 3 else tuple(range(xhat.ndim - 1)))
        gshift = g.sum(axis=(0, 1) if xhat.ndim == 3 else tuple(range(xhat.ndim - 1)))
        gxhat = g * scale.data
        if axes is None:
            gx = gxhat * inv
        else:
            gx = (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            ) * inv
        return gx, gscale, gshift

    return T.autodiff_node(out, (x, scale, shift), vjp)


class BatchNorm1d(Module):
    """Per-channel normalization over batch and time of [B, L, C].

    Train mode normalizes with batch statistics and updates running
    estimates with momentum; eval mode applies the running statistics.
    """

    def __init__(self, channels, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.scale = _param(np.ones(channels, dtype=np.float32))
        self.shift = _param(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            if x.shape[0] * x.shape[1] < 2:
                raise ValueError("batchnorm train mode needs at least 2 frames overall")
            mean = x.data.mean(axis=(0, 1))
            var = x.data.var(axis=(0, 1))
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean.astype(np.float64)
            self.running_var = (1 - m) * self.running_var + m * var.astype(np.float64)
            return _normalize_affine(x, self.scale, self.shift, mean, var, self.eps, axes=(0, 1))
        return _normalize_affine(
            x, self.scale, self.shift, self.running_mean, self.running_var, self.eps, axes=None
        )


class LayerNorm(Module):
    def __init__(self, width, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.scale = _param(np.ones(width, dtype=np.float32))
        self.shift = _param(np.zeros(width, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        mean = x.data.mean(axis=-1, keepdims=True)
        var = x.data.var(axis=-1, keepdims=True)
        return _normalize_affine(x, self.scale, self.shift, mean, var, self.eps, axes=(x.ndim - 1,))


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if not self.training or self.rate <= 0.0:
            return x
        if rng is None:
            raise ValueError("dropout in train mode needs an rng")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) < keep).astype(x.data.dtype) / keep
        return T.mul(x, T.constant(mask))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with n_heads * d_k concatenated heads
    projected back to d_model; dropout acts on the attention weights."""

    def __init__(self, d_model, d_k, n_heads, dropout_rate, *, rng):
        super().__init__()
        self.d_model = d_model
        self.d_k = d_k
        self.n_heads = n_heads
        width = n_heads * d_k
        self.w_q = Linear(d_model, width, rng=rng)
        self.w_k = Linear(d_model, width, rng=rng)
        self.w_v = Linear(d_model, width, rng=rng)
        self.w_out = Linear(width, d_model, rng=rng)
        self.dropout = Dropout(dropout_rate)

    def __call__(self, q_src: Tensor, kv_src: Tensor, rng=None) -> Tensor:
        if q_src.shape[-1] != self.d_model or kv_src.shape[-1] != self.d_model:
            raise T.ShapeMismatchError("multi_head_attention", q_src.shape, (self.d_model,))
        b, lq = q_src.shape[0], q_src.shape[1]
        lk = kv_src.shape[1]
        h, dk = self.n_heads, self.d_k

        def split_heads(t, length):
            t = T.reshape(t, (b, length, h, dk))
            return T.transpose(t, (0, 2, 1, 3))  # [B, H, L, dk]

        q = split_heads(self.w_q(q_src), lq)
        k = split_heads(self.w_k(kv_src), lk)
        v = split_heads(self.w_v(kv_src), lk)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        attn = self.dropout(T.softmax(scores, axis=-1), rng)
        ctx = T.matmul(attn, v)  # [B, H, Lq, dk]
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, lq, h * dk))
        return self.w_out(ctx)


class FeedForward(Module):
    def __init__(self, d_model, d_ff, dropout_rate, *, rng):
        super().__init__()
        self.w1 = Linear(d_model, d_ff, rng=rng)
        self.w2 = Linear(d_ff, d_model, rng=rng)
        self.dropout = Dropout(dropout_rate)

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        return self.w2(self.dropout(T.relu(self.w1(x)), rng))


class TransformerBlock(Module):
    """Attention and feed-forward sublayers, each with a residual
    connection and layer normalization applied to the module output."""

    def __init__(self, d_model, d_k, n_heads, d_ff, dropout_rate, *, rng):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, d_k, n_heads, dropout_rate, rng=rng)
        self.ln1 = LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, dropout_rate, rng=rng)
        self.ln2 = LayerNorm(d_model)

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        x = self.ln1(T.add(x, self.attn(x, x, rng)))
        return self.ln2(T.add(x, self.ff(x, rng)))


class PositionalSequenceEmbedding(Module):
    """Learnable per-position and per-sequence-role offsets.

    ``embed(L, seq_id)`` returns PE[0:L] + SE[seq_id], broadcastable over
    a batch; sequences longer than the table raise.
    """

    def __init__(self, max_len, d_model, *, rng, init_std: float = 0.02):
        super().__init__()
        self.max_len = max_len
        self.position_table = _param(
            (rng.normal(size=(max_len, d_model)) * init_std).astype(np.float32)
        )
        self.sequence_table = _param((rng.normal(size=(2, d_model)) * init_std).astype(np.float32))

    def __call__(self, length: int, seq_id: int) -> Tensor:
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds embedding capacity {self.max_len}")
        if seq_id not in (1, 2):
            raise ValueError(f"seq_id must be 1 or 2, got {seq_id}")
        pe = self.position_table[:length]
        se = T.take(self.sequence_table, [seq_id - 1], axis=0)
        return T.add(pe, se)
