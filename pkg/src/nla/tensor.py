"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable computation in this package is built from the
operations in this module. A :class:`Tensor` wraps a numpy array; each
operation that consumes tensors produces a node remembering its inputs
and a vector-Jacobian product. ``backward()`` on a scalar replays those
records in reverse execution order (creation order is a valid
topological order under eager evaluation, so the node counter doubles
as the tape).

Precision policy: float32 is the default for training; gradient checks
must build float64 leaves (finite differences are unreliable at 32-bit).
Broadcasting follows numpy's trailing-dimension rules.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "GraphFreedError",
    "no_grad",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "square",
    "sqrt",
    "softplus",
    "matmul",
    "softmax",
    "logsumexp",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "cumsum",
    "reshape",
    "transpose",
    "concat",
    "take",
    "maximum_with",
    "autodiff_node",
]

DEFAULT_DTYPE = np.float32

_order_counter = itertools.count()
_grad_enabled = True


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(
            f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        )


class GraphFreedError(RuntimeError):
    """Raised on a second backward() through an already-freed graph."""


@contextmanager
def no_grad():
    """Suppress gradient recording inside the block (eval-mode forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        target = np.dtype(dtype)
    elif arr.dtype in (np.float32, np.float64):
        target = arr.dtype
    else:
        target = np.dtype(DEFAULT_DTYPE)
    if arr.dtype != target:
        arr = arr.astype(target)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A dense real array plus an optional gradient buffer.

    Immutable once created except for ``grad``; graph metadata lives in
    the private ``_parents``/``_vjp`` slots and is dropped after
    ``backward()`` unless the graph is retained.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_order", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._order = next(_order_counter)
        self._freed = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------

    def backward(self, retain_graph: bool = False) -> None:
        """Populate ``grad`` on every reachable requires_grad tensor.

        The loss must be scalar. The graph is freed afterwards unless
        ``retain_graph`` is set; a repeated backward through a freed
        graph raises :class:`GraphFreedError`. With a retained graph,
        repeated calls accumulate (two passes double every grad).
        """
        if self._freed:
            raise GraphFreedError("backward() through an already-freed graph; pass retain_graph=True to keep it")
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        nodes: list[Tensor] = []
        seen = {id(self)}
        stack = [self]
        while stack:
            node = stack.pop()
            nodes.append(node)
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        nodes.sort(key=lambda n: n._order, reverse=True)

        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            contribs = node._vjp(g)
            for parent, gp in zip(node._parents, contribs):
                if gp is None or not parent.requires_grad:
                    continue
                prev = flowing.get(id(parent))
                flowing[id(parent)] = gp if prev is None else prev + gp

        if not retain_graph:
            for node in nodes:
                if node._vjp is not None:
                    node._vjp = None
                    node._parents = ()
                    node._freed = True

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def autodiff_node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Create an op node with a custom vector-Jacobian product.

    ``vjp(g)`` must return one gradient array (or None) per parent, in
    order. Recording is skipped when gradients are disabled or no parent
    requires them.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# -- helpers -------------------------------------------------------------


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, _coerce(b, like=a)
    if isinstance(b, Tensor):
        return _coerce(a, like=b), b
    return _coerce(a), _coerce(b)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over broadcast dimensions back to the input shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def _normalize_axis(axis, ndim: int, op: str):
    if axis is None:
        return None
    if isinstance(axis, (tuple, list)):
        return tuple(_normalize_axis(ax, ndim, op) for ax in axis)
    axis = int(axis)
    if not -ndim <= axis < ndim:
        raise ValueError(f"{op}: axis {axis} out of range for ndim {ndim}")
    return axis % ndim


# -- elementwise binary ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("add", a, b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return autodiff_node(data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("sub", a, b)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return autodiff_node(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("mul", a, b)
    data = a.data * b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return autodiff_node(data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("div", a, b)
    data = a.data / b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g / b_data, a_data.shape)
        gb = _unbroadcast(-g * a_data / (b_data * b_data), b_data.shape)
        return ga, gb

    return autodiff_node(data, (a, b), vjp)


def neg(a) -> Tensor:
    a = _coerce(a)

    def vjp(g):
        return (-g,)

    return autodiff_node(-a.data, (a,), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar without dtype promotion."""
    a = _coerce(a)
    s_arr = np.asarray(s, dtype=a.data.dtype)

    def vjp(g):
        return (g * s_arr,)

    return autodiff_node(a.data * s_arr, (a,), vjp)


# -- elementwise unary -----------------------------------------------------


def exp(a) -> Tensor:
    a = _coerce(a)
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return autodiff_node(data, (a,), vjp)


def log(a) -> Tensor:
    a = _coerce(a)
    a_data = a.data

    def vjp(g):
        return (g / a_data,)

    return autodiff_node(np.log(a.data), (a,), vjp)


def tanh(a) -> Tensor:
    a = _coerce(a)
    data = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - data * data),)

    return autodiff_node(data, (a,), vjp)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    data = _sigmoid_stable(a.data)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return autodiff_node(data, (a,), vjp)


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return autodiff_node(np.where(mask, a.data, 0.0), (a,), vjp)


def square(a) -> Tensor:
    a = _coerce(a)
    a_data = a.data

    def vjp(g):
        return (g * (2.0 * a_data),)

    return autodiff_node(a_data * a_data, (a,), vjp)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    data = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / data),)

    return autodiff_node(data, (a,), vjp)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow; adjoint is sigmoid."""
    a = _coerce(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        return (g * _sigmoid_stable(x),)

    return autodiff_node(data, (a,), vjp)


# -- contraction and normalization ------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from None
    data = np.matmul(a.data, b.data)
    a_data, b_data = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, b_data.swapaxes(-1, -2)), a_data.shape)
        gb = _unbroadcast(np.matmul(a_data.swapaxes(-1, -2), g), b_data.shape)
        return ga, gb

    return autodiff_node(data, (a, b), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = _coerce(a)
    axis = _normalize_axis(axis, a.ndim, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return autodiff_node(data, (a,), vjp)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp composed from primitives (exact gradient)."""
    axis = _normalize_axis(axis, a.ndim, "logsumexp")
    shift = constant(a.data.max(axis=axis, keepdims=True), dtype=a.data.dtype)
    out = log(reduce_sum(exp(sub(a, shift)), axis=axis, keepdims=True)) + shift
    if not keepdims:
        out = reshape(out, _squeeze_shape(out.shape, axis))
    return out


def _squeeze_shape(shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    return tuple(s for i, s in enumerate(shape) if i != axis)


# -- reductions --------------------------------------------------------------


def _restore_dims(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        expanded = list(g.shape)
        for ax in sorted(axes):
            expanded.insert(ax, 1)
        g = g.reshape(expanded)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axis = _normalize_axis(axis, a.ndim, "sum")
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        return (_restore_dims(g, shape, axis, keepdims).copy(),)

    return autodiff_node(np.asarray(data), (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axis = _normalize_axis(axis, a.ndim, "mean")
    data = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))

    def vjp(g):
        return (_restore_dims(g, shape, axis, keepdims) / count,)

    return autodiff_node(np.asarray(data), (a,), vjp)


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axis = _normalize_axis(axis, a.ndim, "max")
    if isinstance(axis, tuple):
        raise ValueError("max: tuple axis not supported")
    data = a.data.max(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    a_data = a.data

    def vjp(g):
        full = _restore_dims(g, shape, axis, keepdims)
        data_full = _restore_dims(np.asarray(data), shape, axis, keepdims)
        mask = (a_data == data_full).astype(a_data.dtype)
        counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        return (full * mask / counts,)

    return autodiff_node(np.asarray(data), (a,), vjp)


def cumsum(a, axis: int = -1) -> Tensor:
    a = _coerce(a)
    axis = _normalize_axis(axis, a.ndim, "cumsum")

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return autodiff_node(np.cumsum(a.data, axis=axis), (a,), vjp)


# -- shape manipulation -------------------------------------------------------


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _coerce(a)
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return autodiff_node(a.data.reshape(shape), (a,), vjp)


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _coerce(a)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return autodiff_node(a.data.transpose(axes), (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    axis = _normalize_axis(axis, ts[0].ndim, "concat")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for k in range(len(ts)):
            slicer[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return autodiff_node(data, tuple(ts), vjp)


def _getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]
    shape = a.data.shape
    dtype = a.data.dtype

    def vjp(g):
        z = np.zeros(shape, dtype=dtype)
        z[idx] += g.reshape(np.shape(z[idx]))
        return (z,)

    return autodiff_node(data.copy(), (a,), vjp)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along an axis by integer index; adjoint scatter-adds."""
    a = _coerce(a)
    axis = _normalize_axis(axis, a.ndim, "take")
    idx = np.asarray(indices, dtype=np.intp)
    data = np.take(a.data, idx, axis=axis)
    shape = a.data.shape
    dtype = a.data.dtype

    def vjp(g):
        z = np.zeros(shape, dtype=dtype)
        z_moved = np.moveaxis(z, axis, 0)
        np.add.at(z_moved, idx, np.moveaxis(g, axis, 0))
        return (z,)

    return autodiff_node(data, (a,), vjp)


def maximum_with(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise, composed as relu(a - floor) + floor."""
    return add(relu(sub(a, floor)), _coerce(floor, like=a))
