"""Reverse-mode differentiation over numpy float64 arrays.

Every op builds a node holding its parents and a closure that pushes the
output gradient back to them. ``Tensor.backward`` orders the graph
topologically once and runs each closure exactly once.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        )

    return _node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (
            (a, _unbroadcast(g / b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None),
        )

    return _node(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: ((x, g * c),))


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: ((x, 2.0 * g * x.data),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        # subgradient 0 at the origin instead of inf * 0
        safe = np.where(out > 0, out, 1.0)
        return ((x, np.where(out > 0, 0.5 * g / safe, 0.0)),)

    return _node(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: ((x, g / x.data),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: ((x, g * out),))


def maximum(x: Tensor, c: float) -> Tensor:
    """Hinge ``max(x, c)`` against a constant; gradient 0 at the kink."""
    active = x.data > c
    return _node(np.where(active, x.data, c), (x,), lambda g: ((x, g * active),))


def relu(x: Tensor) -> Tensor:
    return maximum(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (x,), lambda g: ((x, g * out * (1.0 - out)),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _SQRT_2_OVER_PI * (v + _GELU_C * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _SQRT_2_OVER_PI * (1.0 + 3 * _GELU_C * v * v)
        return ((x, g * d),)

    return _node(out, (x,), backward)


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty: 0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside."""
    v = x.data
    inside = np.abs(v) < beta
    out = np.where(inside, 0.5 * v * v / beta, np.abs(v) - 0.5 * beta)

    def backward(g):
        return ((x, g * np.where(inside, v / beta, np.sign(v))),)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((x, np.broadcast_to(g, x.shape).copy()),)

    return _node(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return scale(tsum(x, axis=axes, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: ((x, g.reshape(x.shape)),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: ((x, np.transpose(g, inverse)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        parts = np.split(g, bounds[1:-1], axis=axis)
        return tuple(zip(tensors, parts))

    return _node(out, tensors, backward)


def index_select(x: Tensor, index) -> Tensor:
    """``x[index]``; repeated fancy indices accumulate gradient."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return ((x, full),)

    return _node(np.array(out, copy=True), (x,), backward)


def take(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (used for positional-embedding lookup)."""
    indices = np.asarray(indices)
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return ((x, full),)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ((a, ga), (b, gb))

    return _node(out, (a, b), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis then apply the affine ``gamma``, ``beta``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxh = g * gamma.data
            gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                        - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        return ((x, gx), (gamma, gg), (beta, gb))

    return _node(out, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((x, out * (g - inner) / temperature),)

    return _node(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        return ((x, g - probs * g.sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# 1-D convolutions, layout (batch, channels, length)
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid cross-correlation. ``weight`` is (out, in, k)."""
    n, cin, length = x.shape
    cout, cin_w, k = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv1d channel mismatch: input {cin}, weight {cin_w}")
    lout = (length - k) // stride + 1
    if lout < 1:
        raise ValueError("conv1d kernel longer than input")
    span = stride * (lout - 1) + 1
    out = np.zeros((n, cout, lout))
    for j in range(k):
        out += np.einsum("oc,bct->bot", weight.data[:, :, j], x.data[:, :, j:j + span:stride])
    parents: list[Tensor] = [x, weight]
    if bias is not None:
        out += bias.data[None, :, None]
        parents.append(bias)

    def backward(g):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for j in range(k):
            sl = x.data[:, :, j:j + span:stride]
            if gx is not None:
                gx[:, :, j:j + span:stride] += np.einsum("oc,bot->bct", weight.data[:, :, j], g)
            if gw is not None:
                gw[:, :, j] = np.einsum("bot,bct->oc", g, sl)
        res = [(x, gx), (weight, gw)]
        if bias is not None:
            res.append((bias, g.sum(axis=(0, 2))))
        return res

    return _node(out, parents, backward)


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed 1-D convolution. ``weight`` is (in, out, k); output length (L-1)*stride + k."""
    n, cin, length = x.shape
    cin_w, cout, k = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv_transpose1d channel mismatch: input {cin}, weight {cin_w}")
    lout = (length - 1) * stride + k
    span = stride * (length - 1) + 1
    out = np.zeros((n, cout, lout))
    for j in range(k):
        out[:, :, j:j + span:stride] += np.einsum("bct,co->bot", x.data, weight.data[:, :, j])
    parents: list[Tensor] = [x, weight]
    if bias is not None:
        out += bias.data[None, :, None]
        parents.append(bias)

    def backward(g):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for j in range(k):
            gs = g[:, :, j:j + span:stride]
            if gx is not None:
                gx += np.einsum("bot,co->bct", gs, weight.data[:, :, j])
            if gw is not None:
                gw[:, :, j] = np.einsum("bct,bot->co", x.data, gs)
        res = [(x, gx), (weight, gw)]
        if bias is not None:
            res.append((bias, g.sum(axis=(0, 2))))
        return res

    return _node(out, parents, backward)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
