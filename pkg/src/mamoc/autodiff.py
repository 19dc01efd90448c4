"""Minimal reverse-mode automatic differentiation over numpy arrays.

The network is small enough that a handful of coarse array operations
(matmul, broadcasting arithmetic, axis reductions, softmax, a few
pointwise nonlinearities, gather and concatenation) cover every layer.
Each operation records its parents and a vector-Jacobian closure;
``Tensor.backward`` walks the graph once in reverse topological order.

Computation stays in the dtype of the inputs, so casting parameters to
float64 switches the whole graph to 64-bit for gradient checking.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from .errors import InvalidArgument

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, _parents=(), _vjp=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _wrap(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        # match dtype so python scalars never upcast a float32 graph
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self._wrap(other)))

    def __rsub__(self, other):
        return add(self._wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, self._wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.shape != ():
            raise InvalidArgument("backward() requires a scalar output")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(a.data + b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor(a.data * b.data, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise InvalidArgument("matmul operands must have at least 2 dims")

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return Tensor(a.data @ b.data, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return Tensor(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _norm_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape),)

    return Tensor(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    n = int(np.prod([a.data.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape) / np.asarray(n, dtype=g.dtype),)

    return Tensor(out, (a,), vjp)


def _softmax_inplace(y: np.ndarray) -> np.ndarray:
    np.subtract(y, y.max(axis=-1, keepdims=True), out=y)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    return y


def _softmax_vjp(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    gy = g * y
    dot = gy.sum(axis=-1, keepdims=True)
    np.subtract(g, dot, out=gy)
    gy *= y
    return gy


def softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    y = _softmax_inplace(a.data.copy())
    return Tensor(y, (a,), lambda g: (_softmax_vjp(y, g),))


def softmax_add(a: Tensor, b: Tensor) -> Tensor:
    """softmax(a + b) over the last axis, with ``b`` broadcastable.

    Fused so attention logits make one trip through memory; the score
    tensors are the largest arrays in the network.
    """
    y = _softmax_inplace(a.data + b.data)

    def vjp(g):
        ga = _softmax_vjp(y, g)
        return ga, _unbroadcast(ga, b.data.shape)

    return Tensor(y, (a, b), vjp)


def sigmoid(a: Tensor) -> Tensor:
    y = special.expit(a.data)
    return Tensor(y, (a,), lambda g: (g * y * (1.0 - y),))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * x.dtype.type(_INV_SQRT2)))
    y = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + x * pdf),)

    return Tensor(y, (a,), vjp)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def vjp(g):
        return (g * (exponent * a.data ** (exponent - 1.0)),)

    return Tensor(out, (a,), vjp)


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``a`` along axis 0 with an integer index array."""

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, index, g)
        return (buf,)

    return Tensor(a.data[index], (a,), vjp)


def stack(tensors: list[Tensor], axis: int = -1) -> Tensor:
    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the last axis: ``x @ w + b``."""
    return add(matmul(x, w), b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel (last) axis, then scale and shift."""
    mu = tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(var + eps, -0.5)
    return add(mul(mul(xc, inv), gamma), beta)
