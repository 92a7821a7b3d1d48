"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations executed while a :class:`Tape` is active (see :func:`recording`)
append a record holding the output, its parents and a vector-Jacobian
product rule.  :meth:`Tape.backward` walks those records in reverse and
accumulates ``grad`` on every tensor that requires one.

Broadcasting in binary operations is limited to trailing-axis expansion:
one operand's shape must equal a suffix of the other's.  Anything else
goes through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "broadcast_to",
    "concat",
    "custom_op",
    "elementwise",
    "log_softmax",
    "log_sum_exp",
    "matmul",
    "no_grad",
    "recording",
    "reduce",
    "stack",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An operation was evaluated outside its mathematical domain."""


_TAPES: list["Tape | None"] = []


def _active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class _Record:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out, parents, vjp):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered log of differentiable operations (define-by-run)."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def _append(self, out: "Tensor", parents, vjp) -> None:
        out.node = len(self.records)
        out._tape = self
        self.records.append(_Record(out, parents, vjp))

    def backward(self, loss: "Tensor") -> dict["Tensor", np.ndarray]:
        """Backpropagate from a scalar ``loss``.

        Gradients of leaf tensors accumulate across calls; reset them with
        :meth:`Tensor.zero_grad` to re-run.  Returns ``{leaf: grad}`` for the
        leaves reached.
        """
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        for rec in self.records:
            rec.out.grad = None
        loss.grad = np.ones_like(loss.value)
        leaves: dict[Tensor, np.ndarray] = {}
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
                if parent.node is None:
                    leaves[parent] = parent.grad
        return leaves


@contextlib.contextmanager
def recording() -> Iterator[Tape]:
    """Record operations on a fresh tape for the duration of the block."""
    tape = Tape()
    _TAPES.append(tape)
    try:
        yield tape
    finally:
        _TAPES.pop()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording inside an enclosing :func:`recording` block."""
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


def backward(loss: "Tensor") -> dict["Tensor", np.ndarray]:
    """Backpropagate through the tape that recorded ``loss``."""
    if loss._tape is None:
        raise ValueError("loss is not attached to a tape")
    return loss._tape.backward(loss)


class Tensor:
    """A float64 array that may participate in a differentiation graph.

    ``requires_grad=True`` marks a leaf (a trainable parameter).  Results of
    recorded operations carry a ``node`` index into their tape; constants
    have ``node is None`` and never receive gradient.
    """

    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self._tape: Tape | None = None
        self.name = name

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # method forms
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def tanh(self):
        return tanh(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    """Return ``x`` unchanged if it is a Tensor, else wrap it as a constant."""
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(
    value: np.ndarray,
    parents: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Create a tensor from a precomputed ``value`` with a user-supplied VJP.

    ``vjp(g)`` receives the upstream gradient (shape of ``value``) and
    returns one gradient (or ``None``) per parent, in order.
    """
    out = Tensor.__new__(Tensor)
    out.value = np.asarray(value, dtype=np.float64)
    out.requires_grad = False
    out.grad = None
    out.node = None
    out._tape = None
    out.name = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._append(out, tuple(parents), vjp)
    return out


# ---------------------------------------------------------------- broadcasting


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"shapes {a} and {b} are not trailing-axis compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + shape).sum(axis=0)


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return custom_op(a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return custom_op(a.value - b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.value, b.value
    return custom_op(av * bv, (a, b),
                     lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.value, b.value
    if np.any(bv == 0.0):
        raise DomainError("division by zero")
    out = av / bv

    def vjp(g):
        return (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))

    return custom_op(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return custom_op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


# ---------------------------------------------------------------- unary ops


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.value, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    if np.any(x <= 0.0):
        raise DomainError("log of a non-positive value")
    return custom_op(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    if np.any(x < 0.0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x)
    return custom_op(out, (a,), lambda g: (0.5 * g / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    return custom_op(x * x, (a,), lambda g: (2.0 * g * x,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return custom_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sinh(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    return custom_op(np.sinh(x), (a,), lambda g: (g * np.cosh(x),))


def cosh(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    return custom_op(np.cosh(x), (a,), lambda g: (g * np.sinh(x),))


def asinh(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    return custom_op(np.arcsinh(x), (a,), lambda g: (g / np.sqrt(1.0 + x * x),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        z = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        return (g * sig,)

    return custom_op(out, (a,), vjp)


def logcosh(a) -> Tensor:
    """log(cosh(x)) without overflow for large |x|."""
    a = as_tensor(a)
    x = a.value
    ax = np.abs(x)
    out = ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)
    return custom_op(out, (a,), lambda g: (g * np.tanh(x),))


# ---------------------------------------------------------------- reductions


def _check_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _expand_grad(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    shape = a.shape
    return custom_op(a.value.sum(axis=axis, keepdims=keepdims), (a,),
                     lambda g: (_expand_grad(g, shape, axis, keepdims),))


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    shape = a.shape
    count = a.size if axis is None else shape[axis]
    return custom_op(a.value.mean(axis=axis, keepdims=keepdims), (a,),
                     lambda g: (_expand_grad(g, shape, axis, keepdims) / count,))


def reduce_max(a, axis=None, keepdims=False) -> Tensor:
    """Maximum; the gradient is routed to the first arg-max only."""
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    x = a.value
    if axis is None:
        flat = int(np.argmax(x))

        def vjp(g):
            out = np.zeros(x.size)
            out[flat] = float(np.reshape(g, ()))
            return (out.reshape(x.shape),)

        return custom_op(x.max(keepdims=keepdims) if keepdims else x.max(), (a,), vjp)

    idx = np.expand_dims(np.argmax(x, axis=axis), axis)

    def vjp(g):
        out = np.zeros_like(x)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(out, idx, gk, axis=axis)
        return (out,)

    return custom_op(x.max(axis=axis, keepdims=keepdims), (a,), vjp)


def log_sum_exp(a, axis=-1, keepdims=False) -> Tensor:
    """Max-shifted log Σ exp along ``axis``; its gradient is a softmax."""
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    soft = np.exp(x - lse)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * soft,)

    return custom_op(out, (a,), vjp)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    out = x - (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True)))
    soft = np.exp(out)
    return custom_op(out, (a,),
                     lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- structure


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return custom_op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return custom_op(np.transpose(a.value, axes), (a,),
                     lambda g: (np.transpose(g, inverse),))


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style expansion (leading axes and size-1 axes)."""
    a = as_tensor(a)
    shape = tuple(shape)
    old = a.shape
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    lead = len(shape) - len(old)

    def vjp(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        ones = tuple(i for i, d in enumerate(old) if d == 1 and shape[lead + i] != 1)
        if ones:
            g = g.sum(axis=ones, keepdims=True)
        return (g,)

    return custom_op(out, (a,), vjp)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    x = a.value

    def vjp(g):
        out = np.zeros_like(x)
        np.add.at(out, index, g)
        return (out,)

    return custom_op(x[index], (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return custom_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    n = len(tensors)
    return custom_op(out, tensors,
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


_UNARY = {
    "neg": neg, "exp": exp, "log": log, "sqrt": sqrt, "square": square,
    "tanh": tanh, "sinh": sinh, "asinh": asinh, "cosh": cosh,
    "softplus": softplus, "logcosh": logcosh,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_REDUCE = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if kind in _BINARY:
        if b is None:
            raise TypeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


def reduce(kind: str, a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if kind not in _REDUCE:
        raise ValueError(f"unknown reduction {kind!r}")
    return _REDUCE[kind](a, axis, keepdims)
