"""Dense float64 tensors with reverse-mode differentiation.

Every operation that touches a tensor requiring gradients is recorded on an
implicit tape: the output keeps references to its inputs, a closure that
pushes the output gradient back to them, and a global sequence number.
``Tensor.backward`` collects the ancestors of the loss and replays the
closures in strictly decreasing sequence order, i.e. reverse execution order,
so each recorded operation is visited exactly once.

Gradients accumulate additively; call :func:`zero_grad` between steps.
"""
from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "tensor", "no_grad", "is_grad_enabled", "zero_grad",
    "matmul", "add", "sub", "mul", "concat", "row_softmax_masked", "sigmoid",
    "tanh", "relu", "exp", "log", "abs_", "sum_", "mean", "reshape", "swapaxes",
    "layer_norm", "binary_cross_entropy", "l1_masked", "custom_op",
    "GradCheckReport", "check_gradients", "BCE_CLAMP",
]

BCE_CLAMP = 1e-7

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, frozen extraction)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = -1
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        # collect every recorded ancestor, then replay in reverse execution order
        nodes: dict[int, Tensor] = {}
        stack = [self]
        seen = {id(self)}
        while stack:
            t = stack.pop()
            if t._backward is not None:
                nodes[t._seq] = t
            for p in t._parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        if self._backward is None:
            self._accum(pending[id(self)])
            return
        for s in sorted(nodes, reverse=True):
            t = nodes[s]
            g = pending.pop(id(t), None)
            if g is None:
                continue
            grads = t._backward(g)
            for p, pg in zip(t._parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._backward is None:
                    p._accum(pg)
                elif id(p) in pending:
                    pending[id(p)] = pending[id(p)] + pg
                else:
                    pending[id(p)] = pg

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(o))

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._seq = next(_seq)
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Record a fused operation. ``backward(g)`` returns one gradient (or None) per parent."""
    return _make(np.asarray(data, dtype=np.float64), parents, backward, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def matmul(a, b) -> Tensor:
    """``a @ b`` for 2-D operands or stacks of matrices; a 2-D ``b`` is shared across the stack."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        if ad.ndim == 1:
            gb = np.outer(ad, g)
        elif bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=ax), ts,
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def _getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward, "getitem")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


# ------------------------------------------------------------- nonlinearity

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    d = a.data
    return _make(np.log(d), (a,), lambda g: (g / d,), "log")


def abs_(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


# --------------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def row_softmax_masked(a: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Masked entries are exactly 0. A row with no unmasked entry raises.
    """
    a = _as_tensor(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not m.any(axis=-1).all():
        raise ValueError("row_softmax_masked: fully masked row")
    x = np.where(m, a.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(x), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), backward, "softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then scale and shift (fused forward and backward)."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeError(f"layer_norm: scale {gamma.shape}/{beta.shape} vs input {a.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    n = x.shape[-1]

    def backward(g):
        gx = g * gd
        ga = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, n)
        return ga, (flat * xhat.reshape(-1, n)).sum(axis=0), flat.sum(axis=0)

    return _make(xhat * gd + beta.data, (a, gamma, beta), backward, "layer_norm")


# ------------------------------------------------------------------- losses

def binary_cross_entropy(prob: Tensor, target, pos_weight: float = 1.0,
                         reduce: bool = True) -> Tensor:
    """Cross entropy on probabilities (not logits), clamped to [1e-7, 1 - 1e-7]."""
    prob = _as_tensor(prob)
    y = np.broadcast_to(np.asarray(target, dtype=np.float64), prob.shape)
    p = np.clip(prob.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    w = np.where(y > 0.5, pos_weight, 1.0)
    per = -w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))
    dper = -w * (y / p - (1.0 - y) / (1.0 - p))
    if reduce:
        n = per.size
        return _make(np.asarray(per.mean()), (prob,), lambda g: (g * dper / n,), "bce")
    return _make(per, (prob,), lambda g: (g * dper,), "bce")


def l1_masked(a: Tensor, mask, axes: tuple[int, ...] = (-2, -1)) -> Tensor:
    """Mean absolute value over the entries selected by ``mask`` along ``axes``.

    Slices with an empty mask contribute 0.
    """
    a = _as_tensor(a)
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), a.shape)
    cnt = m.sum(axis=axes, keepdims=True)
    scale = np.where(cnt > 0, 1.0 / np.maximum(cnt, 1.0), 0.0) * m
    sgn = np.sign(a.data)
    val = (np.abs(a.data) * scale).sum(axis=axes)
    shape = a.shape

    def backward(g):
        g = np.asarray(g)
        for ax in sorted(ax % len(shape) for ax in axes):
            g = np.expand_dims(g, ax)
        return (g * sgn * scale,)

    return _make(val, (a,), backward, "l1_masked")


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------- gradient checks

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]] | None
    n_checked: int
    errors: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor] | Sequence[Tensor],
                    eps: float = 1e-6, tol: float | None = None,
                    floor: float = 1e-3, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn()`` with central differences.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps entries whose true gradient is ~0 from reporting round-off as
    a large relative error. ``max_entries`` subsamples entries per parameter.
    """
    named = params if isinstance(params, dict) else {f"p{i}": p for i, p in enumerate(params)}
    for p in named.values():
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("check_gradients: non-finite loss")
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in named.items()}
    worst_err, worst, count, per = 0.0, None, 0, {}
    with no_grad():
        for k, p in named.items():
            idxs = list(np.ndindex(*p.shape)) if p.ndim else [()]
            if max_entries is not None and len(idxs) > max_entries:
                rng = rng or np.random.default_rng(0)
                pick = rng.choice(len(idxs), size=max_entries, replace=False)
                idxs = [idxs[i] for i in sorted(pick)]
            perr = 0.0
            for ix in idxs:
                orig = p.data[ix].copy()
                p.data[ix] = orig + eps
                fp = float(loss_fn().data)
                p.data[ix] = orig - eps
                fm = float(loss_fn().data)
                p.data[ix] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError("check_gradients: non-finite loss under perturbation")
                num = (fp - fm) / (2.0 * eps)
                a = float(analytic[k][ix])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                count += 1
                perr = max(perr, err)
                if err > worst_err or worst is None:
                    worst_err, worst = max(err, worst_err), (k, tuple(int(i) for i in np.atleast_1d(ix)))
            per[k] = perr
    report = GradCheckReport(worst_err, worst, count, per)
    if tol is not None and not report.ok(tol):
        raise AssertionError(f"gradient check failed: max rel error {worst_err:.3e} at {worst}")
    return report
