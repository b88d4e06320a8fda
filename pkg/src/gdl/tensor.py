"""Dense float64 tensors with a small reverse-mode autodiff tape.

Only the operations the diffusion/guidance code needs are provided. Ops are
recorded on the innermost active :class:`GradTape` whenever one of their
inputs requires a gradient; outside a tape every op is a plain numpy
evaluation.

Broadcasting is restricted to the batch-leading form: two operands must have
equal shapes, or the shape of one must be a suffix of the other (a scalar is
the empty suffix). Anything else is rejected.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class Tensor:
    """Row-major float64 array that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[GradTape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

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
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return affine(self, 1.0 / float(other))

    def __neg__(self):
        return affine(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


class GradTape:
    """Ordered record of differentiable ops, consumed by :func:`backward`.

    Use as a context manager; ops evaluated inside the block whose inputs
    require gradients are appended in execution order, so the record is
    topologically sorted by construction.
    """

    def __init__(self):
        self.records: list = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Optional[GradTape]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording on any enclosing tape."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append((out, tuple(inputs), rule))
    return out


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: shapes {a} and {b} do not broadcast over leading axes")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


# ---------------------------------------------------------------- arithmetic


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def affine(x: ArrayLike, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` with python-float coefficients."""
    x = as_tensor(x)
    scale, shift = float(scale), float(shift)
    return _record(scale * x.data + shift, (x,), lambda g: (scale * g,))


def reciprocal(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / x.data
    return _record(out, (x,), lambda g: (-g * out * out,))


def square(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (0.5 * g / out,))


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: ArrayLike) -> Tensor:
    # relu'(0) = 0
    x = as_tensor(x)
    mask = x.data > 0
    # np.maximum keeps NaN visible to divergence checks
    return _record(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of ``(..., n, k) @ (k, m)`` or ``(n, k) @ (k, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record(ad @ bd, (a, b), rule)


def transpose(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return _record(x.data.T.copy(), (x,), lambda g: (g.T,))


def linear(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> Tensor:
    """Fused ``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return _record(out, (x, weight), lambda g: (g @ wd, g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])))
    bias = as_tensor(bias)
    if bias.shape != (wd.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wd, g2.T @ xd.reshape(-1, xd.shape[-1]), g2.sum(axis=0)

    return _record(out + bias.data, (x, weight, bias), rule)


def layer_norm(x: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine part)."""
    x = as_tensor(x)
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm: empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _record(xhat, (x,), rule)


# ---------------------------------------------------------------- reductions


def sum_(x: ArrayLike, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % x.ndim
    return _record(
        x.data.sum(axis=ax), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)
    )


def mean(x: ArrayLike, axis: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("mean: empty tensor")
    count = x.size if axis is None else x.shape[axis]
    return affine(sum_(x, axis), 1.0 / count)


# ---------------------------------------------------------------- probability


def softmax(x: ArrayLike) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax: empty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (x,), rule)


def log_softmax(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("log_softmax: empty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _record(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def kl_divergence(p: ArrayLike, log_q: ArrayLike) -> Tensor:
    """KL(p || q) over the last axis, averaged over leading rows.

    ``p`` holds probabilities and ``log_q`` log-probabilities. Entries with
    ``p == 0`` contribute zero.
    """
    p, log_q = as_tensor(p), as_tensor(log_q)
    if p.shape != log_q.shape:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {log_q.shape} differ")
    if p.ndim == 0 or p.shape[-1] == 0:
        raise ShapeError("kl_divergence: empty last axis")
    rows = max(1, p.size // p.shape[-1])
    pd, lq = p.data, log_q.data
    pos = pd > 0
    log_p = np.log(np.where(pos, pd, 1.0))
    with np.errstate(invalid="ignore"):
        value = np.where(pos, pd * (log_p - lq), 0.0).sum() / rows

    def rule(g):
        with np.errstate(invalid="ignore"):
            gp = np.where(pos, log_p + 1.0 - lq, 0.0) * (g / rows)
        return gp, -pd * (g / rows)

    return _record(np.asarray(value), (p, log_q), rule)


def take_last(x: ArrayLike, index: np.ndarray) -> Tensor:
    """Pick ``x[i, index[i]]`` for a (B, C) tensor."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError(f"take_last: bad shapes {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def rule(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return _record(x.data[rows, index], (x,), rule)


def cross_entropy(logits: ArrayLike, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    return -mean(take_last(log_softmax(logits), labels))


# ---------------------------------------------------------------- distances


def l1_distance(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Mean absolute difference (sign(0) = 0 in the gradient)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = max(diff.size, 1)
    sign = np.sign(diff) / n
    return _record(np.asarray(np.abs(diff).sum() / n), (a, b), lambda g: (g * sign, -g * sign))


def mse(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = max(diff.size, 1)
    return _record(
        np.asarray((diff * diff).sum() / n), (a, b), lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n)
    )


# ---------------------------------------------------------------- shape ops


def concat(tensors: Sequence[ArrayLike]) -> Tensor:
    """Concatenate along the last axis; leading shapes must match."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: nothing to concatenate")
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes {lead} and {t.shape[:-1]} differ")
    bounds = np.cumsum([0] + [t.shape[-1] for t in ts])

    def rule(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _record(np.concatenate([t.data for t in ts], axis=-1), ts, rule)


def slice_(x: ArrayLike, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(np.array(x.data[index]), (x,), rule)


def reshape(x: ArrayLike, shape: tuple) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- gradients


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. The tape that
    recorded ``loss`` is consumed and cannot be replayed.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("backward: loss was not recorded on an active GradTape")
    if tape.consumed:
        raise RuntimeError("backward: tape already consumed")
    grads = {id(loss): np.ones(())}
    produced = set()
    for out, inputs, rule in reversed(tape.records):
        produced.add(id(out))
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, rule(g)):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t._tape is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    tape.records.clear()
    tape.consumed = True


def grad_of(loss: Tensor, wrt: Tensor) -> np.ndarray:
    """Convenience: run :func:`backward` and return a fresh gradient for ``wrt``."""
    wrt.grad = None
    backward(loss)
    return np.zeros(wrt.shape) if wrt.grad is None else wrt.grad


def finite_diff_grad(f: Callable[[Tensor], ArrayLike], x: ArrayLike, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("finite_diff_grad: step h must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    out = np.zeros_like(base)
    flat, gflat = base.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(np.asarray(as_tensor(f(Tensor(base.copy()))).data))
        flat[i] = orig - h
        fm = float(np.asarray(as_tensor(f(Tensor(base.copy()))).data))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(out)
