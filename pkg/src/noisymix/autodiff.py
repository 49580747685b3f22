"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every operation appends a node to the active graph. Vector-Jacobian products are
themselves written with ``Tensor`` operations, so a backward pass run with
``create_graph=True`` is differentiable again (used for Hessian-vector products).
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

_counter = itertools.count()
_recording = [True]


@contextmanager
def no_grad():
    """Evaluate without recording parents (forward-only, cheap)."""
    prev = _recording[0]
    _recording[0] = False
    try:
        yield
    finally:
        _recording[0] = prev


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """A dense float64 array that remembers how it was computed."""

    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, parents: Sequence["Tensor"] = (), vjp: Callable | None = None,
                 op: str = "leaf", requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.op = op
        self.index = next(_counter)
        if parents:
            self.requires_grad = _recording[0] and any(p.requires_grad for p in parents)
        else:
            self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents) if (parents and self.requires_grad) else ()
        self._vjp = vjp if self._parents else None

    # ---- basic properties ----------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, op={self.op})"

    def __len__(self):
        return len(self.data)

    # ---- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(ensure(other)))

    def __rsub__(self, other):
        return add(ensure(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(ensure(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(ensure(other), self)

    def __pow__(self, power: float):
        return power_(self, power)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return sum_(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def sigmoid(self):
        return sigmoid(self)


def ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite value produced by {op}")


def _node(data, parents, vjp, op) -> Tensor:
    _check_finite(data, op)
    return Tensor(data, parents, vjp, op)


def unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return reshape(g, shape)


# ---- primitive operations ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    sa, sb = a.shape, b.shape
    return _node(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b, sa), unbroadcast(g * a, sb)), "mul")


def div(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = g / b
        return unbroadcast(ga, sa), unbroadcast(neg(ga * a / b), sb)

    return _node(a.data / b.data, (a, b), vjp, "div")


def power_(a: Tensor, p: float) -> Tensor:
    return _node(a.data ** p, (a,), lambda g: (g * (p * a ** (p - 1)),), f"pow{p}")


def matmul(a, b) -> Tensor:
    a, b = ensure(a), ensure(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)), "matmul")


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T, (a,), lambda g: (transpose(g),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),), "reshape")


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = tuple(ax % len(shape) for ax in axes)
            kept = [1 if i in axes else n for i, n in enumerate(shape)]
            g = reshape(g, tuple(kept))
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)

    return _node(out, (a,), vjp, "sum")


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _node(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (unbroadcast(g, src),), "broadcast")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def vjp(g):
        return (scatter(g, idx, shape),)

    return _node(a.data[idx], (a,), vjp, "getitem")


def scatter(g: Tensor, idx, shape) -> Tensor:
    """Adjoint of ``getitem``: place ``g`` into zeros of ``shape`` at ``idx``."""
    out = np.zeros(shape)
    np.add.at(out, idx, g.data)
    return _node(out, (g,), lambda h: (getitem(h, idx),), "scatter")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [ensure(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp, "concat")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        out_data = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    out = _node(out_data, (a,), vjp, "exp")
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericalError("log of non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a,), "log")


def tanh(a: Tensor) -> Tensor:
    def vjp(g):
        return (g * (1.0 - out * out),)

    out = _node(np.tanh(a.data), (a,), vjp, "tanh")
    return out


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    def vjp(g):
        return (g * out * (1.0 - out),)

    out = _node(_sigmoid_np(a.data), (a,), vjp, "sigmoid")
    return out


def softplus(a: Tensor) -> Tensor:
    return _node(_softplus_np(a.data), (a,), lambda g: (g * sigmoid(a),), "softplus")


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient flows only where a > floor."""
    mask = (a.data > floor).astype(np.float64)
    return _node(np.maximum(a.data, floor), (a,), lambda g: (g * mask,), "clip_min")


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a - m
    return log(sum_(exp(shifted), axis=axis, keepdims=True)) + m


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return a - logsumexp(a, axis)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    e = exp(a - m)
    return e / sum_(e, axis=axis, keepdims=True)


# ---- differentiation --------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    # creation index is a valid topological order: parents are always older
    return sorted(seen.values(), key=lambda t: t.index)


def grad(root: Tensor, leaves: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Return d(root)/d(leaf) for each leaf as Tensors.

    With ``create_graph`` the returned gradients are themselves differentiable.
    """
    if root.size != 1:
        raise ContractError(f"gradient root must be scalar, got shape {root.shape}")
    grads: dict[int, Tensor] = {}
    order = _topo(root)
    ctx = _null() if create_graph else no_grad()
    with ctx:
        grads[id(root)] = Tensor(np.ones_like(root.data))
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    out = []
    for leaf in leaves:
        g = grads.get(id(leaf))
        out.append(g if g is not None else Tensor(np.zeros_like(leaf.data)))
    return out


@contextmanager
def _null():
    yield


def backward(root: Tensor, leaves: Sequence[Tensor]) -> None:
    """Fill ``leaf.grad`` (ndarray) for each leaf."""
    for leaf, g in zip(leaves, grad(root, leaves)):
        leaf.grad = g.data.copy()


def value_and_grad(fn: Callable[..., Tensor], *arrays: np.ndarray):
    """Evaluate ``fn`` on fresh leaves and return (value, [gradients as ndarrays])."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    gs = grad(out, leaves)
    return out.item(), [g.data for g in gs]


def hvp(fn: Callable[[Tensor], Tensor], x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hessian of scalar ``fn`` at ``x`` applied to ``v`` (double backprop)."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != x.shape:
        raise DimensionError(f"direction shape {v.shape} != point shape {x.shape}")
    leaf = Tensor(x, requires_grad=True)
    out = fn(leaf)
    (g,) = grad(out, [leaf], create_graph=True)
    directional = sum_(g * Tensor(v))
    if not directional.requires_grad:
        return np.zeros_like(x)
    (h,) = grad(directional, [leaf])
    return h.data


def hessian(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Dense Hessian of a scalar function of a flat vector, one hvp per basis vector."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    eye = np.eye(n)
    cols = [hvp(fn, x, eye[k].reshape(x.shape)).ravel() for k in range(n)]
    return np.stack(cols, axis=1)
