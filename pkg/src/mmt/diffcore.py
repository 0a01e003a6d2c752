"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: every primitive records an entry on the active tape while
gradients are enabled. ``backward`` walks that tape once in reverse order,
so gradient accumulation order is deterministic and repeated calls without
a grad reset accumulate additively.
"""

from contextlib import contextmanager

import numpy as np

from .errors import NumericError, ShapeError

_L2_EPS = 1e-12  # under the square root; keeps the coincident-point gradient finite
_LOG_EPS = 1e-12


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``grad`` is a same-shape buffer allocated iff ``requires_grad``; it is
    only written by ``backward`` and ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self):
        return Tensor(self.data)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self):
        return tmean(self)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, recorded):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = recorded
    out.grad = np.zeros_like(data) if recorded else None
    return out


class _Entry:
    __slots__ = ("output", "inputs", "grad_fn")

    def __init__(self, output, inputs, grad_fn):
        self.output = output
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tape:
    """Ordered record of executed operations; inputs always precede use."""

    def __init__(self):
        self.entries = []

    def __len__(self):
        return len(self.entries)

    def clear(self):
        self.entries.clear()


_DEFAULT_TAPE = Tape()
_tape_stack = [_DEFAULT_TAPE]
_grad_enabled = True


def active_tape():
    return _tape_stack[-1]


def reset_default_tape():
    _DEFAULT_TAPE.clear()


@contextmanager
def new_tape():
    """Push a fresh tape for one forward/backward pass."""
    tape = Tape()
    _tape_stack.append(tape)
    try:
        yield tape
    finally:
        _tape_stack.pop()


@contextmanager
def no_grad():
    """Disable recording; outputs come back detached."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _record(data, inputs, grad_fn):
    tracked = _grad_enabled and any(t.requires_grad for t in inputs)
    out = _result(data, tracked)
    if tracked:
        active_tape().entries.append(_Entry(out, inputs, grad_fn))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- primitives ---


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def neg(a):
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    return _record(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _record(y, (a,), lambda g: (g * 0.5 / np.maximum(y, _L2_EPS),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def clip(a, lo, hi):
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def tsum(a, axis=None):
    a = as_tensor(a)
    shape = a.data.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(a.data.sum(axis=axis), (a,), grad_fn)


def tmean(a):
    a = as_tensor(a)
    n = a.data.size
    shape = a.data.shape
    return _record(a.data.mean(), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def take_rows(a, indices):
    """Gather rows along axis 0; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), grad_fn)


def row_softmax(a):
    """Softmax over the last axis, max-shifted for stability."""
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("row_softmax: NaN in input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (a,), grad_fn)


def _l2(a, b, axis):
    diff = a.data - b.data
    sq = (diff * diff).sum(axis=axis)
    dist = np.sqrt(sq)
    denom = np.sqrt(sq + _L2_EPS)

    def grad_fn(g):
        if axis is None:
            scaled = (g / denom) * diff
        else:
            scaled = np.expand_dims(g / denom, axis) * diff
        return (scaled, -scaled)

    return dist, grad_fn


def l2_distance(a, b):
    """Euclidean distance between two equal-length vectors.

    The backward rule uses sqrt(sum + eps) in the denominator so the
    gradient at coincident points is zero instead of NaN.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"l2_distance: need equal 1-d shapes, got {a.data.shape} vs {b.data.shape}")
    dist, grad_fn = _l2(a, b, axis=None)
    return _record(dist, (a, b), grad_fn)


def row_l2_distance(a, b):
    """Row-wise Euclidean distance between two [B, d] tensors -> [B]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or a.data.shape != b.data.shape:
        raise ShapeError(f"row_l2_distance: need equal 2-d shapes, got {a.data.shape} vs {b.data.shape}")
    dist, grad_fn = _l2(a, b, axis=1)
    return _record(dist, (a, b), grad_fn)


def backward(loss, tape=None):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    Traversal state is local to the call, so invoking backward twice on the
    same graph adds the gradients twice.
    """
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    tape = tape if tape is not None else active_tape()
    flows = {id(loss): [loss, np.ones_like(loss.data)]}
    for entry in reversed(tape.entries):
        slot = flows.get(id(entry.output))
        if slot is None:
            continue
        for t, g in zip(entry.inputs, entry.grad_fn(slot[1])):
            if g is None or not t.requires_grad:
                continue
            cur = flows.get(id(t))
            if cur is None:
                flows[id(t)] = [t, np.array(g, dtype=np.float64)]
            else:
                cur[1] += g
    for t, g in flows.values():
        if t.requires_grad:
            t.grad += g.reshape(t.data.shape)


def grad_check(f, point, eps=1e-5):
    """Compare the taped gradient of scalar-valued ``f`` at ``point`` against
    central finite differences. Returns the worst mixed relative error
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with new_tape():
        x = Tensor(base, requires_grad=True)
        out = f(x)
        if out.data.size != 1:
            raise ShapeError("grad_check: f must be scalar-valued")
        backward(out)
        analytic = x.grad.reshape(-1).copy()
    flat = base.reshape(-1)
    numeric = np.zeros_like(analytic)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(Tensor(base)).data)
            flat[i] = orig - eps
            lo = float(f(Tensor(base)).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


def log_clipped(a):
    """log with the argument clamped away from 0 and 1 saturation points."""
    return log(clip(a, _LOG_EPS, 1.0 - _LOG_EPS))
