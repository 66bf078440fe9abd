"""Dense tensors with tape-based reverse-mode differentiation.

Values live in numpy arrays of rank 0..3. Every op checks its output for
NaN/Inf and, when a :class:`Tape` is recording and some input requires a
gradient, appends an adjoint closure to the tape. ``backward`` replays the
tape in reverse execution order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

MAX_RANK = 3

_DEFAULT_DTYPE = [np.dtype(np.float32)]
_ACTIVE_TAPES: list["Tape"] = []


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors.

    ``precision("float64")`` is used for gradient checks; training runs in
    float32.
    """
    _DEFAULT_DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype())
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of executed ops.

    Use as a context manager; ops executed inside the block that touch a
    tensor with ``requires_grad`` are recorded. The graph is rebuilt per step.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], adjoint: Callable) -> None:
        self.records.append((out, inputs, adjoint))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor that requires grad."""
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, adjoint in reversed(tape.records):
        g = adj.pop(id(out), None)
        if g is None:
            continue
        grads = adjoint(g)
        for t, gt in zip(inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if key in adj:
                adj[key] = adj[key] + gt
            else:
                adj[key] = gt
                touched[key] = t
    # whatever remains unconsumed belongs to leaves (or to the loss itself)
    for key, g in adj.items():
        t = touched[key]
        if not t.requires_grad:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------- helpers

def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, inputs: Sequence[Tensor], adjoint: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    if out.requires_grad and _ACTIVE_TAPES:
        _ACTIVE_TAPES[-1].record(out, tuple(inputs), adjoint)
    return out


# -------------------------------------------------------- element-wise ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def adjoint(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), adjoint, "div")


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _make(a.data * a.data.dtype.type(factor), (a,), lambda g: (g * factor,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


# ------------------------------------------------------- structural ops

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; a leading batch axis broadcasts."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.shape[-1] < 1:
        raise DimensionError("matmul inner extent must be >= 1")
    out = np.matmul(a.data, b.data)

    def adjoint(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), adjoint, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError("transpose needs rank >= 2")
    return _make(np.swapaxes(a.data, -1, -2).copy(), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    if out.ndim > MAX_RANK:
        raise DimensionError(f"rank {out.ndim} exceeds the maximum of {MAX_RANK}")
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a) -> Tensor:
    """Row-major flattening of everything but a leading batch axis (rank 3), or of all axes."""
    a = as_tensor(a)
    if a.ndim == 3:
        return reshape(a, (a.shape[0], -1))
    return reshape(a, (-1,))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), adjoint, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), adjoint, "concat")


def take(a, index, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis`` (repeats allowed)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    out = np.take(a.data, index, axis=axis)

    def adjoint(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None),) * axis + (index,), g)
        return (ga,)

    return _make(out, (a,), adjoint, "take")


# ------------------------------------------------------- normalisations

def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), adjoint, "softmax")


def softmax_rows(a) -> Tensor:
    return softmax(a, axis=-1)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def adjoint(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), adjoint, "log_softmax")


NORM_EPS = 1e-12


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def adjoint(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1)
        return (np.where(n > 0, a.data / safe, 0) * np.expand_dims(g, axis),)

    return _make(out, (a,), adjoint, "norm")


def l2_normalize_rows(a) -> Tensor:
    """Divide each row (last axis) by max(||row||, 1e-12); zero rows stay zero."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    active = n > NORM_EPS
    denom = np.where(active, n, NORM_EPS)
    out = a.data / denom

    def adjoint(g):
        # inside the clamp the denominator is constant
        radial = np.where(active, (g * out).sum(axis=-1, keepdims=True) * out, 0)
        return ((g - radial) / denom,)

    return _make(out, (a,), adjoint, "l2_normalize")


def batch_norm(x, gamma, beta, eps: float = 1e-5):
    """Training-mode batch norm over axis 0 of a (batch x features) tensor.

    Returns the normalised tensor plus the batch mean and (biased) variance as
    arrays for running-statistics bookkeeping.
    """
    x = as_tensor(x)
    mu = mean(x, axis=0, keepdims=True)
    centred = x - mu
    var = mean(centred * centred, axis=0, keepdims=True)
    x_hat = centred / sqrt(var + eps)
    return x_hat * gamma + beta, mu.data.ravel(), var.data.ravel()


# ------------------------------------------------------------- checking

class GradCheckError(AssertionError):
    """A finite-difference probe hit a non-finite value."""


def grad_check(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` rebuilds a scalar graph that reads ``param``; it must be
    deterministic. ``param.data`` is perturbed in place and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    saved_grad = param.grad
    param.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    analytic = np.zeros_like(param.data) if param.grad is None else param.grad.copy()
    param.grad = saved_grad

    flat = param.data.reshape(-1)
    numeric = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        try:
            flat[i] = orig + step
            hi = float(fn().data)
            flat[i] = orig - step
            lo = float(fn().data)
        except NonFiniteError as exc:
            raise GradCheckError(f"non-finite value while probing coordinate {i}") from exc
        finally:
            flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise GradCheckError(f"non-finite value while probing coordinate {i}")
        numeric[i] = (hi - lo) / (2 * step)
    a = analytic.reshape(-1).astype(np.float64)
    rel = np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0
