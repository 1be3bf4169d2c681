"""Dense tensors over numpy arrays with a reverse-mode gradient tape.

Every differentiable operation whose inputs require gradients appends a record
to the active :class:`Tape`. :func:`backward` walks the tape once in reverse,
accumulating into ``.grad`` of leaf tensors, then retires the tape.
"""
from __future__ import annotations

import contextlib

import numpy as np

from . import kernels

IGNORE_INDEX = -100
MASK_VALUE = -1e9


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Backward was requested on a stale tape or a non-scalar output."""


# ---------------------------------------------------------------------------
# process-wide settings

_state = {"dtype": np.float32, "grad_enabled": True, "check_finite": False}


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float precision (64-bit for gradchecks)."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def set_check_finite(flag: bool) -> None:
    """When on, every op output is scanned and NaN/Inf raises FloatingPointError."""
    _state["check_finite"] = bool(flag)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self.records = []
        self.generation = 0

    def record(self, out, inputs, backward_fn):
        self.records.append((out, inputs, backward_fn))

    def reset(self):
        self.records = []
        self.generation += 1

    def __len__(self):
        return len(self.records)


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


def reset_tape() -> None:
    _TAPE.reset()


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_generation", "_recorded", "supervised")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._generation = -1
        self._recorded = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators
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
            raise TypeError("only division by a constant is supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return permute(self, axes)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn) -> Tensor:
    """Wrap an op result and record it when any input participates in the tape."""
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._generation = -1
    out._recorded = False
    if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._generation = _TAPE.generation
        out._recorded = True
        _TAPE.record(out, inputs, backward_fn)
    else:
        out.requires_grad = False
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _const(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _const(a, b)
    b = _const(b, a)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _const(a, b)
    b = _const(b, a)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a) if isinstance(a, Tensor) or not isinstance(b, Tensor) else _const(a, b)
    b = _const(b, a)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # fold leading axes into one 2-D product
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _make(out, (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return permute(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: {x.shape} -> {shape}") from exc
    src = x.shape
    return _make(out, (x,), lambda g: (_unbroadcast(g, src),))


def getitem(x: Tensor, idx) -> Tensor:
    out = np.ascontiguousarray(x.data[idx])
    src, dt = x.shape, x.data.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def bw(g):
        full = np.zeros(src, dtype=dt)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _make(out, (x,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(tensors), bw)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"stack: incompatible shapes {shapes}") from exc

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), bw)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]
    src = weight.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src[-1]))
        return (full,)

    return _make(out, (weight,), bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax: empty last axis in shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    flat = xd.reshape(-1)
    out = np.empty_like(flat)
    cdf = np.empty_like(flat)
    kernels.gelu_forward(flat, out, cdf)

    def bw(g):
        gx = np.empty_like(flat)
        kernels.gelu_backward(flat, cdf, np.ascontiguousarray(g, dtype=flat.dtype).reshape(-1), gx)
        return (gx.reshape(xd.shape),)

    return _make(out.reshape(xd.shape), (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs last extent {d}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw)


def cross_entropy_logits(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-softmax over non-ignored targets.

    When every target is ignored the result is a zero scalar with
    ``supervised == 0``; otherwise ``supervised`` holds the supervised count.
    """
    V = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    flat_t = targets.reshape(-1)
    keep = flat_t != ignore_index
    bad = keep & ((flat_t < 0) | (flat_t >= V))
    if bad.any():
        raise IndexError(f"cross_entropy: target id {int(flat_t[bad][0])} outside [0, {V})")
    n = int(keep.sum())
    dt = logits.data.dtype
    flat = logits.data.reshape(-1, V)
    if n == 0:
        out = _make(np.zeros((), dtype=dt), (logits,), lambda g: (np.zeros_like(logits.data),))
        out.supervised = 0
        return out
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(keep)[0]
    loss = np.asarray(-logp[rows, flat_t[rows]].sum() / n, dtype=dt)

    def bw(g):
        p = np.exp(logp)
        grad = np.zeros_like(flat)
        grad[rows] = p[rows]
        grad[rows, flat_t[rows]] -= 1.0
        return ((grad * (g / n)).reshape(logits.shape).astype(dt, copy=False),)

    out = _make(loss, (logits,), bw)
    out.supervised = n
    return out


# ---------------------------------------------------------------------------
# backward and verification


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from scalar ``loss``; retires the tape."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor requiring grad")
    if loss._recorded and loss._generation != _TAPE.generation:
        raise TapeError("stale tape: loss was recorded on a tape that has already been consumed")
    if not loss._recorded:
        # leaf scalar
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(_TAPE.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._recorded:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    _TAPE.reset()


def gradcheck(f, inputs, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``inputs`` is a Tensor or list of Tensors (all 64-bit, requiring grad);
    ``f`` maps them to a scalar Tensor. Relative error uses the denominator
    max(|a|, |b|, 1e-8).
    """
    single = isinstance(inputs, Tensor)
    xs = [inputs] if single else list(inputs)
    for x in xs:
        if x.data.dtype != np.float64:
            raise TypeError("gradcheck requires 64-bit tensors (use precision(np.float64))")
    call = (lambda: f(xs[0])) if single else (lambda: f(*xs))
    reset_tape()
    saved = [x.requires_grad for x in xs]
    for x in xs:
        x.requires_grad = True
        x.grad = None
    y = call()
    if y.size != 1:
        raise TapeError(f"gradcheck: f must return a scalar, got shape {y.shape}")
    backward(y)
    worst = 0.0
    with no_grad():
        for x in xs:
            analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
            flat = x.data.reshape(-1)
            agrad = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(call().data)
                flat[i] = orig - h
                fm = float(call().data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                a = float(agrad[i])
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
    for x, s in zip(xs, saved):
        x.requires_grad = s
        x.grad = None
    return worst
