"""Reverse-mode differentiable array engine.

Every differentiable operation records one node on a thread-local tape.
Recording order is a topological order by construction, so ``backward``
just walks the tape in reverse. The tape is cleared after each backward
pass unless ``retain_tape=True``.

Values are float32. Broadcasting is restricted to scalar-vs-tensor.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32


class DimensionError(ValueError):
    pass


class _TapeState(threading.local):
    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.enabled = True


_state = _TapeState()


def tape_nodes():
    """The ops recorded on this thread's tape so far (oldest first)."""
    return list(_state.nodes)


def clear_tape():
    _state.nodes.clear()


def is_grad_enabled() -> bool:
    return _state.enabled


@contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None, retain_tape: bool = False):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        Leaves accumulate across calls (gradient accumulation); intermediate
        tensors get their grad overwritten.
        """
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones(self.shape, dtype=DTYPE)
        pending: dict[int, tuple[Tensor, np.ndarray]] = {
            id(self): (self, np.asarray(grad, dtype=DTYPE).reshape(self.shape))
        }
        for out, parents, fn in reversed(_state.nodes):
            entry = pending.pop(id(out), None)
            if entry is None:
                continue
            g = entry[1]
            out.grad = g
            for p, gp in zip(parents, fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                prev = pending.get(id(p))
                pending[id(p)] = (p, gp if prev is None else prev[1] + gp)
        for leaf, g in pending.values():
            g = np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if not retain_tape:
            clear_tape()

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
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a constant")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)


def _not_scalar(t):
    raise DimensionError(f"item() needs a single element, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = _state.enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _state.nodes.append((out, tuple(parents), backward))
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1 and t.ndim <= 1 or t.ndim == 0


def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=DTYPE).reshape(t.shape)


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)))


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    if not (a.shape == b.shape == m.shape):
        raise DimensionError(f"where: shapes {m.shape}, {a.shape}, {b.shape} must match")
    zero = np.zeros((), dtype=DTYPE)
    return _record(np.where(m, a.data, b.data), (a, b),
                   lambda g: (np.where(m, g, zero), np.where(m, zero, g)))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


# ----------------------------------------------------------------- unary ops

def _unary(x, fwd, dfn) -> Tensor:
    x = as_tensor(x)
    y = fwd(x.data)
    return _record(y, (x,), lambda g: (g * dfn(x.data, y),))


def _sigmoid(v):
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    return _unary(x, _sigmoid, lambda v, y: y * (1.0 - y))


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda v, y: 1.0 - y * y)


def relu(x) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0), lambda v, y: (v > 0).astype(DTYPE))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    return _unary(x, lambda v: np.where(v > 0, v, slope * v),
                  lambda v, y: np.where(v > 0, 1.0, slope).astype(DTYPE))


def log(x) -> Tensor:
    return _unary(x, np.log, lambda v, y: 1.0 / v)


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda v, y: y)


def square(x) -> Tensor:
    return _unary(x, np.square, lambda v, y: 2.0 * v)


def abs_(x) -> Tensor:
    return _unary(x, np.abs, lambda v, y: np.sign(v))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    return _unary(x, lambda v: np.clip(v, lo, hi),
                  lambda v, y: ((v >= lo) & (v <= hi)).astype(DTYPE))


def stop_gradient(x) -> Tensor:
    """Forward identity; contributes no gradient to ``x``."""
    return Tensor(as_tensor(x).data)


def straight_through(source, value) -> Tensor:
    """Return ``value``'s data bit-exactly while routing the gradient to ``source``."""
    source, value = as_tensor(source), as_tensor(value)
    if source.shape != value.shape:
        raise DimensionError(f"straight_through: {source.shape} vs {value.shape}")
    return _record(value.data.copy(), (source,), lambda g: (g,))


# ---------------------------------------------------------------- reductions

def sum_(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=DTYPE)
    return _record(total, (x,), lambda g: (np.full(shape, g, dtype=DTYPE),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    total = np.asarray(x.data.mean(dtype=np.float64), dtype=DTYPE)
    return _record(total, (x,), lambda g: (np.full(shape, g / n, dtype=DTYPE),))


def masked_mean(x, mask) -> Tensor:
    """Mean of ``x`` over entries where the constant ``mask`` is true."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape:
        raise DimensionError(f"masked_mean: mask {m.shape} vs {x.shape}")
    n = int(m.sum())
    if n == 0:
        raise ValueError("masked_mean: mask selects nothing")
    w = m.astype(DTYPE) / n
    total = np.asarray((x.data.astype(np.float64) * w).sum(), dtype=DTYPE)
    return _record(total, (x,), lambda g: (g * w,))


def l1_loss(a, b, mask=None) -> Tensor:
    """Mean absolute difference."""
    d = abs_(sub(a, b))
    return mean(d) if mask is None else masked_mean(d, mask)


def l2_loss(a, b, mask=None) -> Tensor:
    """Mean squared difference."""
    d = square(sub(a, b))
    return mean(d) if mask is None else masked_mean(d, mask)


# ------------------------------------------------------------------- shaping

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(x, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gx[idx] += g
        return (gx,)

    return _record(np.ascontiguousarray(x.data[idx]), (x,), backward)


def gather_rows(table, indices) -> Tensor:
    """``table[indices]`` for a 2-D table and an integer array; scatter-add backward."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    rows, cols = table.shape

    def backward(g):
        gt = np.zeros((rows, cols), dtype=DTYPE)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, cols))
        return (gt,)

    return _record(table.data[idx], (table,), backward)


# ------------------------------------------------------------- normalisation

def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalisation over [N, C, ...] with per-channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c = x.shape[:2]
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm: affine shape must be ({c},)")
    spatial = x.shape[2:]
    xg = x.data.reshape(n, groups, -1).astype(np.float64)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    bshape = (1, c) + (1,) * len(spatial)
    xhat_c = xhat.reshape(x.shape)
    y = xhat_c * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = xg.shape[2]
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        g64 = g.astype(np.float64)
        ggamma = (g64 * xhat_c).sum(axis=red)
        gbeta = g64.sum(axis=red)
        gxhat = (g64 * gamma.data.reshape(bshape)).reshape(n, groups, m)
        gx = inv / m * (m * gxhat - gxhat.sum(axis=2, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=2, keepdims=True))
        return gx.reshape(x.shape), ggamma, gbeta

    return _record(y, (x, gamma, beta), backward)


# ---------------------------------------------------------------- gradcheck

def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], wrt: int, eps: float = 1e-3) -> np.ndarray:
    """Central differences of ``sum(fn(*inputs))`` with respect to ``inputs[wrt]``."""
    x = inputs[wrt]
    out = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + DTYPE(eps)
            hi, fp = float(flat[i]), float(fn(*inputs).data.sum(dtype=np.float64))
            flat[i] = orig - DTYPE(eps)
            lo, fm = float(flat[i]), float(fn(*inputs).data.sum(dtype=np.float64))
            flat[i] = orig
            out.reshape(-1)[i] = (fp - fm) / (hi - lo)
    return out


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-3) -> float:
    """Largest norm-wise relative error between tape and finite-difference gradients."""
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    clear_tape()
    fn(*inputs).sum().backward()
    worst = 0.0
    for k, t in enumerate(inputs):
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        numeric = numeric_grad(fn, inputs, k, eps)
        scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-6)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
