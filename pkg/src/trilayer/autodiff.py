"""Reverse-mode automatic differentiation over numpy arrays.

Every ``Tensor`` records its parents and a VJP closure. The closures are
written in terms of Tensor ops themselves, so adjoints are ordinary graph
nodes: a gradient produced by :func:`grad` can be fed back into a loss and
differentiated again. This is what lets the surface-regularity penalty
(which is a function of a spatial gradient) receive exact parameter
gradients from a single reverse pass.

All values are float64. Constants (anything not reachable from a leaf
with ``requires_grad``) carry no graph and cost a plain numpy op.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / adjoint math)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus the recorded op that produced it."""

    __slots__ = ("data", "parents", "_vjp", "requires_grad", "grad")

    def __init__(self, data, parents=(), vjp=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        if _grad_enabled and (requires_grad or any(p.requires_grad for p in parents)):
            self.parents = tuple(parents)
            self._vjp = vjp
            self.requires_grad = True
        else:
            self.parents = ()
            self._vjp = None
            self.requires_grad = False
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents, vjp) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, parents, vjp)
    return Tensor(data)


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Sum an adjoint back down to the shape of a broadcast operand."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return g


# binary ops ---------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data + b.data, (a, b), None)
    if out.requires_grad:
        out._vjp = lambda g, need: (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(g, b.shape) if need[1] else None,
        )
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data - b.data, (a, b), None)
    if out.requires_grad:
        out._vjp = lambda g, need: (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(neg(g), b.shape) if need[1] else None,
        )
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data * b.data, (a, b), None)
    if out.requires_grad:
        out._vjp = lambda g, need: (
            _unbroadcast(g * b, a.shape) if need[0] else None,
            _unbroadcast(g * a, b.shape) if need[1] else None,
        )
    return out


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data / b.data, (a, b), None)
    if out.requires_grad:
        out._vjp = lambda g, need: (
            _unbroadcast(g / b, a.shape) if need[0] else None,
            _unbroadcast(neg(g * out / b), b.shape) if need[1] else None,
        )
    return out


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, need: (neg(g),))


def power(a, p: float):
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    p = float(p)
    out = _make(a.data**p, (a,), None)
    if out.requires_grad:
        out._vjp = lambda g, need: (g * (power(a, p - 1.0) * p),)
    return out


def matmul(a, b):
    """2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data @ b.data, (a, b), None)
    if out.requires_grad:
        out._vjp = lambda g, need: (
            matmul(g, transpose(b)) if need[0] else None,
            matmul(transpose(a), g) if need[1] else None,
        )
    return out


def where(cond, a, b):
    """Select by a constant boolean mask; gradients route per branch."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = _make(np.where(cond, a.data, b.data), (a, b), None)
    if out.requires_grad:
        mask = Tensor(cond.astype(np.float64))
        inv = Tensor((~cond).astype(np.float64))
        out._vjp = lambda g, need: (
            _unbroadcast(g * mask, a.shape) if need[0] else None,
            _unbroadcast(g * inv, b.shape) if need[1] else None,
        )
    return out


# unary ops ----------------------------------------------------------------


def exp(a):
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), None)
    if out.requires_grad:
        out._vjp = lambda g, need: (g * out,)
    return out


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g, need: (g / a,))


def sqrt(a):
    a = as_tensor(a)
    out = _make(np.sqrt(a.data), (a,), None)
    if out.requires_grad:
        out._vjp = lambda g, need: (g * (0.5 / out),)
    return out


def sin(a):
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g, need: (g * cos(a),))


def cos(a):
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g, need: (neg(g * sin(a)),))


def absolute(a):
    a = as_tensor(a)
    out = _make(np.abs(a.data), (a,), None)
    if out.requires_grad:
        sign = Tensor(np.sign(a.data))
        out._vjp = lambda g, need: (g * sign,)
    return out


def relu(a):
    a = as_tensor(a)
    out = _make(np.maximum(a.data, 0.0), (a,), None)
    if out.requires_grad:
        mask = Tensor((a.data > 0.0).astype(np.float64))
        out._vjp = lambda g, need: (g * mask,)
    return out


def _sigmoid_np(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _make(_sigmoid_np(a.data), (a,), None)
    if out.requires_grad:
        out._vjp = lambda g, need: (g * (out * (1.0 - out)),)
    return out


def softplus(a, beta: float = 1.0):
    """log(1 + exp(beta x)) / beta, numerically stable."""
    a = as_tensor(a)
    out = _make(np.logaddexp(0.0, beta * a.data) / beta, (a,), None)
    if out.requires_grad:
        out._vjp = lambda g, need: (g * sigmoid(a * beta),)
    return out


def clip(a, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient is zero outside the open interval."""
    a = as_tensor(a)
    out = _make(np.clip(a.data, lo, hi), (a,), None)
    if out.requires_grad:
        mask = Tensor(((a.data > lo) & (a.data < hi)).astype(np.float64))
        out._vjp = lambda g, need: (g * mask,)
    return out


def stop_gradient(a) -> Tensor:
    """Value of ``a`` severed from the graph."""
    return Tensor(as_tensor(a).data)


# shape ops ----------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g, need: (reshape(g, old),))


def transpose(a):
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g, need: (transpose(g),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(
        np.broadcast_to(a.data, shape), (a,), lambda g, need: (_unbroadcast(g, old),)
    )


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), None)
    if out.requires_grad:
        shape = a.shape

        def vjp(g, need):
            if axis is None:
                return (broadcast_to(g, shape),)
            axes = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                kshape = list(shape)
                for ax in axes:
                    kshape[ax] = 1
                g = reshape(g, tuple(kshape))
            return (broadcast_to(g, shape),)

        out._vjp = vjp
    return out


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def concatenate(tensors: Sequence, axis: int = -1):
    ts = [as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), None)
    if out.requires_grad:
        sizes = [t.shape[axis] for t in ts]
        offsets = np.cumsum([0] + sizes)

        def vjp(g, need):
            grads = []
            for i in range(len(ts)):
                if not need[i]:
                    grads.append(None)
                    continue
                index = [slice(None)] * g.ndim
                index[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
                grads.append(take(g, tuple(index)))
            return tuple(grads)

        out._vjp = vjp
    return out


def take(a, index):
    """Basic or integer-array indexing; the adjoint scatter-adds."""
    a = as_tensor(a)
    shape = a.shape
    return _make(a.data[index], (a,), lambda g, need: (scatter(g, index, shape),))


def scatter(g, index, shape):
    """zeros(shape) with ``g`` added at ``index`` (duplicates accumulate)."""
    g = as_tensor(g)
    buf = np.zeros(shape, dtype=np.float64)
    np.add.at(buf, index, g.data)
    return _make(buf, (g,), lambda gg, need: (take(gg, index),))


def cumsum(a, axis: int = -1):
    a = as_tensor(a)
    out = _make(np.cumsum(a.data, axis=axis), (a,), None)
    if out.requires_grad:
        out._vjp = lambda g, need: (flip(cumsum(flip(g, axis), axis), axis),)
    return out


def flip(a, axis: int = -1):
    a = as_tensor(a)
    return _make(np.flip(a.data, axis=axis), (a,), lambda g, need: (flip(g, axis),))


def norm(a, axis=-1, keepdims=False):
    """Euclidean norm along an axis."""
    return sqrt(sum_(mul(a, a), axis=axis, keepdims=keepdims))


# reverse pass -------------------------------------------------------------


def _toposort(root: Tensor) -> list:
    """Ancestors of ``root`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(root: Tensor, seed: Tensor, targets: set[int]) -> dict[int, Tensor]:
    """Adjoint accumulation from ``root``; only branches reaching ``targets``."""
    order = _toposort(root)
    needed: set[int] = set()
    for node in order:
        if id(node) in targets or any(id(p) in needed for p in node.parents):
            needed.add(id(node))
    adjoint: dict[int, Tensor] = {id(root): seed}
    for node in reversed(order):
        g = adjoint.get(id(node))
        if g is None or node._vjp is None:
            continue
        need = tuple(p.requires_grad and id(p) in needed for p in node.parents)
        if not any(need):
            continue
        for p, pg in zip(node.parents, node._vjp(g, need)):
            if pg is None:
                continue
            prev = adjoint.get(id(p))
            adjoint[id(p)] = pg if prev is None else prev + pg
    return adjoint


def grad(output: Tensor, wrt: Sequence[Tensor], seed=None) -> list[Tensor]:
    """Differentiable gradients of ``output`` with respect to ``wrt``.

    ``seed`` defaults to ones; for a batch of independent scalar outputs
    this yields the per-row gradient in one pass.
    """
    if seed is None:
        seed = Tensor(np.ones(output.shape))
    seed = as_tensor(seed)
    targets = {id(w) for w in wrt}
    adjoint = _propagate(output, seed, targets)
    out = []
    for w in wrt:
        g = adjoint.get(id(w))
        out.append(g if g is not None else Tensor(np.zeros(w.shape)))
    return out


def backward(loss: Tensor, params: Iterable[Tensor]) -> None:
    """Accumulate ``loss`` gradients into ``p.grad`` for each leaf in params.

    Parameters not reached by the graph keep their existing (zeroed) grad.
    Raises if the root is not scalar.
    """
    if loss.shape != ():
        raise ValueError(f"backward root must be scalar, got shape {loss.shape}")
    params = list(params)
    targets = {id(p) for p in params}
    with no_grad():
        adjoint = _propagate(loss, Tensor(1.0), targets)
    for p in params:
        g = adjoint.get(id(p))
        if p.grad is None:
            p.grad = np.zeros(p.shape)
        if g is not None:
            p.grad = p.grad + g.data


class ParameterStore:
    """Ordered name -> parameter registry with flat (de)serialization."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = parameter(data)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros(p.shape)

    def flat(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([p.data.ravel() for p in self._params.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for p in self._params.values():
            n = p.size
            p.data = vec[offset : offset + n].reshape(p.shape).copy()
            offset += n
        if offset != vec.size:
            raise ValueError(f"flat vector has {vec.size} values, expected {offset}")
