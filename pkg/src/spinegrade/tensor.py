"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: numpy float64 storage (float32 available as an
opt-in inference precision), and an explicit per-forward-pass ``Tape`` that
records operations in execution order.  ``Tape.backward`` replays the record
in strict reverse order, so replay order is always a valid reverse
topological order of the graph.

Recording is opt-in: an operation is recorded only if one of its inputs
already lives on a tape.  A forward pass therefore starts by constructing its
input with ``Tensor(data, tape=tape)``; parameters are plain
``requires_grad`` leaves and receive gradients without ever being bound to a
tape, which keeps independently trained models (e.g. cross-validation folds)
fully isolated from each other.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    """N-dimensional dense float array, optionally recorded on a :class:`Tape`.

    Attributes:
        data: the underlying numpy array (row-major, float64 by default).
        grad: gradient buffer of identical shape, populated by ``backward``.
        requires_grad: marks trainable leaves; their grads accumulate across
            backward calls until reset to ``None``.
        tape: the tape this tensor was recorded on, or ``None`` for leaves.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False,
                 tape: "Tape | None" = None, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float64
        self.data: Array = arr.astype(dtype, copy=False)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.tape = tape
        self.name = name

    @classmethod
    def param(cls, data, name: str | None = None) -> "Tensor":
        return cls(data, requires_grad=True, name=name)

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
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad,
                      name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("param")
        if self.tape is not None:
            flags.append("taped")
        tag = f" [{','.join(flags)}]" if flags else ""
        nm = f" {self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}{nm})"

    # operator sugar; all arithmetic goes through the module-level ops
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of one forward pass.

    Nodes are appended in execution order, which is topological by
    construction; backward replays them in strict reverse record order and
    visits each node exactly once.  Within one backward call gradients flow
    through a scratch map, so intermediate tensors end up holding the
    gradient of that call (useful for activation inspection) while
    ``requires_grad`` leaves accumulate across calls until zeroed.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Optional[Tensor], ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: Sequence[Optional[Tensor]],
               vjp: Callable[[Array], tuple]) -> None:
        self._nodes.append((out, tuple(inputs), vjp))

    def clear(self) -> None:
        self._nodes.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, vjp in reversed(self._nodes):
            g_out = grads.get(id(out))
            if g_out is None:
                continue  # node does not feed the loss
            for t, g in zip(inputs, vjp(g_out)):
                if t is None or g is None:
                    continue
                if not (t.requires_grad or t.tape is not None):
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    holders[key] = t
        for key, t in holders.items():
            if t.requires_grad and t.grad is not None:
                t.grad = t.grad + grads[key]
            else:
                t.grad = grads[key]


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tape ancestor of the scalar ``loss``."""
    if loss.tape is None:
        raise ValueError("loss is not recorded on any tape")
    loss.tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, inputs: Sequence[Optional[Tensor]], vjp) -> Tensor:
    tape = None
    for t in inputs:
        if t is not None and t.tape is not None:
            tape = t.tape
            break
    out = Tensor(data, tape=tape)
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_data(opname: str, a: Tensor, b: Tensor, fn) -> Array:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(
            f"{opname}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = _binary_data("add", a, b, np.add)
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                          _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = _binary_data("sub", a, b, np.subtract)
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                          _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = _binary_data("mul", a, b, np.multiply)
    return _make(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                          _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    src = a.data
    return _make(np.maximum(src, 0.0), (a,), lambda g: (g * (src > 0),))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError(
            f"log: non-positive input (min={a.data.min():g}); clamp first")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul,
                "relu": relu, "log": log, "exp": exp, "neg": neg}
_UNARY = {"relu", "log", "exp", "neg"}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by op name; binary ops require ``b``, unary ops reject it."""
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary")
        return _ELEMENTWISE[op](a)
    if b is None:
        raise ValueError(f"{op} needs two operands")
    return _ELEMENTWISE[op](a, b)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through unclamped entries."""
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched over equal leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: ranks {a.ndim} and {b.ndim} unsupported")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    if a.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims disagree, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        return g @ bt, at @ g

    return _make(data, (a, b), vjp)


def transpose_last2(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2 needs rank >= 2, got {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2).copy(), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax; each slice along ``axis`` sums to 1."""
    a = _as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise ValueError("softmax: input has non-finite entries")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    z = np.exp(shifted)
    out = z / z.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# shape ops

def concat_channels(a, b) -> Tensor:
    """Concatenate along the channel axis of CxHxW or NxCxHxW tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 3 or a.ndim != b.ndim:
        raise ShapeError(
            f"concat_channels: need matching rank >= 3, got {a.shape} and {b.shape}")
    axis = a.ndim - 3
    if a.shape[-2:] != b.shape[-2:] or a.shape[:axis] != b.shape[:axis]:
        raise ShapeError(
            f"concat_channels: non-channel dims differ, {a.shape} vs {b.shape}")
    c1 = a.shape[axis]
    data = np.concatenate([a.data, b.data], axis=axis)

    def vjp(g):
        ga, gb = np.split(g, [c1], axis=axis)
        return ga, gb

    return _make(data, (a, b), vjp)


def concat_batch(a, b) -> Tensor:
    """Concatenate along the leading (batch) axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(
            f"concat_batch: trailing dims differ, {a.shape} vs {b.shape}")
    n = a.shape[0]
    return _make(np.concatenate([a.data, b.data], axis=0), (a, b),
                 lambda g: (g[:n], g[n:]))


def slice_batch(a, start: int, stop: int) -> Tensor:
    """Contiguous slice along the leading axis; gradient scatters back."""
    a = _as_tensor(a)
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"slice_batch [{start}:{stop}] outside batch {a.shape[0]}")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), vjp)


def stack_along(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Stack same-shape tensors along a new axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack_along needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack_along: shapes differ, {shape} vs {t.shape}")
    data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(tensors)))

    return _make(data, tuple(tensors), vjp)


def flip_width(a) -> Tensor:
    """Reverse the last (width) axis.  Exact involution."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"flip_width needs rank >= 2, got {a.shape}")
    return _make(np.ascontiguousarray(np.flip(a.data, -1)), (a,),
                 lambda g: (np.ascontiguousarray(np.flip(g, -1)),))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(a.shape),))


def column(a, j: int) -> Tensor:
    """Select index ``j`` of the last axis, dropping that axis."""
    a = _as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[..., j] = g
        return (full,)

    return _make(a.data[..., j].copy(), (a,), vjp)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(data, (a,), vjp)


def make_op(data: Array, inputs: Sequence[Optional[Tensor]], vjp) -> Tensor:
    """Record a custom operation (used by layers with hand-written gradients).

    ``vjp(grad_out)`` must return one gradient (or ``None``) per input, each
    matching that input's shape.
    """
    return _make(data, inputs, vjp)
