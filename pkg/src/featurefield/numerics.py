"""Minimal dense-tensor arithmetic with reverse-mode gradients and Adam.

Everything is numpy-backed. A :class:`GradientTape` records differentiable
operations in execution order; ``backward`` replays the record in exact
reverse order and accumulates gradients for watched parameters. Tensors with
no active tape are plain immutable value holders, so inference paths pay no
autodiff overhead.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
operand may be a trailing suffix of the other (bias add), or have explicit
size-1 axes at equal rank (row scaling). Anything fancier raises
:class:`ShapeError`.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


class NumericsError(RuntimeError):
    """Raised on invalid numeric state (non-finite values, bad tape use)."""


class Tensor:
    """A dense array of reals. Treat as immutable outside optimizer updates."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def require_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"{context}: non-finite values encountered")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # Operator sugar; all arithmetic goes through the module-level ops so
    # everything lands on the active tape.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class _TapeOp:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


_tape_context = threading.local()


def _active_tape():
    return getattr(_tape_context, "tape", None)


class GradientTape:
    """Ordered record of differentiable ops plus a parameter registry.

    Use as a context manager around the forward pass. The tape is exclusively
    owned by the thread that opened it; tapes on other threads are invisible
    to this one.
    """

    def __init__(self):
        self._ops: list[_TapeOp] = []
        self._watched: dict[int, Tensor] = {}
        self._grads: dict[int, np.ndarray] = {}
        self._ran_backward = False

    def __enter__(self):
        if _active_tape() is not None:
            raise NumericsError("a GradientTape is already active on this thread")
        _tape_context.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_context.tape = None
        return False

    def watch(self, *tensors: Tensor):
        """Register parameters whose gradients should be retained."""
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError("watch() expects Tensor instances")
            self._watched[id(t)] = t

    def record(self, name: str, inputs: Sequence[Tensor], output: Tensor,
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        """Append a custom differentiable op to the tape.

        ``backward(upstream)`` must return one gradient array (or None) per
        input, each matching that input's shape.
        """
        self._ops.append(_TapeOp(name, tuple(inputs), output, backward))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(param) for every watched parameter.

        The op record is walked in exact reverse order of recording;
        gradients add across multiple uses of the same tensor.
        """
        if not isinstance(loss, Tensor):
            raise TypeError("loss must be a Tensor")
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if not self._ops:
            raise NumericsError("backward: tape is empty")
        if self._ran_backward:
            raise NumericsError("backward: tape already consumed")
        self._ran_backward = True

        grads = self._grads
        grads[id(loss)] = np.ones_like(loss.data)
        for op in reversed(self._ops):
            upstream = grads.get(id(op.output))
            if upstream is None:
                continue
            for tensor, grad in zip(op.inputs, op.backward(upstream)):
                if grad is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

    def gradient(self, param: Tensor) -> np.ndarray:
        """Gradient of the loss w.r.t. a watched parameter (zeros if untouched)."""
        if id(param) not in self._watched:
            raise NumericsError("gradient() queried for an unwatched tensor")
        grad = self._grads.get(id(param))
        if grad is None:
            return np.zeros_like(param.data)
        return grad

    def gradients(self, params: dict) -> dict:
        """Gradients for a name->Tensor mapping, as a name->array mapping."""
        return {name: self.gradient(p) for name, p in params.items()}


def backward(tape: GradientTape, loss: Tensor):
    """Functional alias for ``tape.backward(loss)``."""
    tape.backward(loss)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def _check_broadcast(name, a_shape, b_shape):
    """Permit equal shapes, trailing-suffix shapes, or explicit size-1 axes."""
    if a_shape == b_shape:
        return
    if len(b_shape) < len(a_shape) and a_shape[len(a_shape) - len(b_shape):] == b_shape:
        return
    if len(a_shape) < len(b_shape) and b_shape[len(b_shape) - len(a_shape):] == a_shape:
        return
    if len(a_shape) == len(b_shape) and all(
        x == y or x == 1 or y == 1 for x, y in zip(a_shape, b_shape)
    ):
        return
    raise ShapeError(f"{name}: shapes {a_shape} and {b_shape} do not conform")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce an upstream gradient back to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _result(name, inputs, value, backward_fn):
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None:
        tape.record(name, inputs, out, backward_fn)
    return out


def _pair(a, b):
    """Coerce to Tensors without silently promoting float32 to float64."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# differentiable ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        return [g @ b.data.T, a.data.T @ g]

    return _result("matmul", (a, b), a.data @ b.data, back)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a.shape, b.shape)

    def back(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

    return _result("add", (a, b), a.data + b.data, back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a.shape, b.shape)

    def back(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]

    return _result("sub", (a, b), a.data - b.data, back)


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = _pair(a, b)
    _check_broadcast("mul", a.shape, b.shape)

    def back(g):
        return [_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)]

    return _result("mul", (a, b), a.data * b.data, back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def back(g):
        return [g * c]

    return _result("scale", (a,), a.data * c, back)


def relu(a) -> Tensor:
    a = as_tensor(a)

    def back(g):
        return [g * (a.data > 0)]

    return _result("relu", (a,), np.maximum(a.data, 0), back)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    value = _stable_sigmoid(a.data)

    def back(g):
        return [g * value * (1.0 - value)]

    return _result("sigmoid", (a,), value, back)


def exp(a) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.data)

    def back(g):
        return [g * value]

    return _result("exp", (a,), value, back)


def log(a) -> Tensor:
    a = as_tensor(a)

    def back(g):
        return [g / a.data]

    return _result("log", (a,), np.log(a.data), back)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed overflow-safe; derivative is sigmoid(x)."""
    a = as_tensor(a)
    value = np.logaddexp(0.0, a.data)

    def back(g):
        return [g * _stable_sigmoid(a.data)]

    return _result("softplus", (a,), value, back)


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def back(g):
        return [g * np.sign(a.data)]

    return _result("absolute", (a,), np.abs(a.data), back)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    ref = parts[0].data.ndim
    for p in parts:
        if p.data.ndim != ref:
            raise ShapeError(
                f"concat: rank mismatch {parts[0].shape} vs {p.shape}")
    ax = axis if axis >= 0 else ref + axis
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return [
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=ax)
            for i in range(len(parts))
        ]

    return _result("concat", tuple(parts), np.concatenate([p.data for p in parts], axis=ax), back)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def back(g):
        if axis is None:
            return [np.broadcast_to(g, a.shape).copy()]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [np.broadcast_to(gg, a.shape).copy()]

    return _result("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def back(g):
        return [g.reshape(a.shape)]

    return _result("reshape", (a,), a.data.reshape(shape), back)


def getitem(a, key) -> Tensor:
    """Basic slicing (slices / integers) as a differentiable op."""
    a = as_tensor(a)

    def back(g):
        out = np.zeros_like(a.data)
        out[key] += g
        return [out]

    return _result("slice", (a,), a.data[key], back)


def gather_rows(table, index: np.ndarray) -> Tensor:
    """table[index] with gradient scatter-added back into the table rows.

    ``index`` is a plain integer array of any shape; the result has shape
    index.shape + table.shape[1:].
    """
    table = as_tensor(table)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-d, got {table.shape}")
    index = np.asarray(index)

    def back(g):
        out = np.zeros_like(table.data)
        np.add.at(out, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return [out]

    return _result("gather_rows", (table,), table.data[index], back)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """Per-parameter first/second moment estimates plus the step counter."""

    def __init__(self, params: dict, learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """One Adam update, in place on ``params``.

    Rejects non-finite gradients before touching any state, so a bad step
    leaves parameters, moments, and the step count untouched.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: gradient shape {g.shape} != parameter shape "
                f"{p.data.shape} for '{name}'")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"adam_step: non-finite gradient for '{name}'")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        denom = np.sqrt(v / bias2)
        denom += state.eps
        p.data -= state.learning_rate * (m / bias1) / denom
