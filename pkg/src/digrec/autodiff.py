"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every op computes its value eagerly. When a :class:`Tape` is active and at
least one input requires a gradient, the op appends a record holding the
saved activations and a backward closure. ``Tape.backward`` replays the
records in reverse and accumulates into :class:`Param` gradients.

Without an active tape the same code runs as plain inference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

CHECK_FINITE = True

_ACTIVE: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __len__(self):
        return self.value.shape[0]

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}{self.value.shape}"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """A persistent array. ``trainable=False`` pins its gradient to exact zero."""

    __slots__ = ("grad",)

    def __init__(self, value, name: str, trainable: bool = True):
        super().__init__(value, requires_grad=trainable, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    out: Tensor
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable ops; use as a context manager."""

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def backward(self, loss: Tensor) -> None:
        if loss.value.size != 1:
            raise ValueError("backward() needs a scalar loss")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for rec in reversed(self.records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if isinstance(parent, Param):
                    parent.grad += pg
                else:
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg


def no_tape() -> bool:
    return not _ACTIVE


def _emit(op: str, value: np.ndarray, parents: tuple, backward) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite output from {op}")
    tracked = bool(_ACTIVE) and any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=tracked)
    if tracked:
        _ACTIVE[-1].records.append(Record(op, out, parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _emit("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _emit("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _emit("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def stop_gradient(a: Tensor) -> Tensor:
    """sg[x]: same value, no path back to ``a``."""
    return Tensor(a.value.copy())


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([p.value for p in parts], axis=axis), tuple(parts),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def scatter_rows(idx: np.ndarray, vals: np.ndarray, n_rows: int,
                 weights: np.ndarray | None = None, src: np.ndarray | None = None) -> np.ndarray:
    """Sum ``weights[j] * vals[src[j]]`` into row ``idx[j]`` of an (n_rows, d) zero array."""
    idx = np.asarray(idx, dtype=np.int64).ravel()
    src = np.arange(len(idx)) if src is None else np.asarray(src).ravel()
    w = np.ones(len(idx)) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    m = sparse.csr_matrix((w, (idx, src)), shape=(n_rows, vals.shape[0]))
    return np.asarray(m @ vals)


def take_rows(a: Tensor, idx) -> Tensor:
    """Row gather ``a[idx]``; the backward pass scatter-adds into repeated rows."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def back(g):
        return (scatter_rows(idx, g, shape[0]),)

    return _emit("take_rows", a.value[idx], (a,), back)


def bag_mean(table: Tensor, idx: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked mean of ``table`` rows per bag; empty bags give the zero vector.

    idx, mask: (n, H) arrays; padded slots carry mask 0 and any valid index.
    """
    idx = np.asarray(idx, dtype=np.int64)
    w = np.asarray(mask, dtype=np.float64)
    counts = w.sum(axis=1, keepdims=True)
    w = w / np.maximum(counts, 1.0)
    rows = table.value[idx]                       # n, H, d
    out = np.einsum("nh,nhd->nd", w, rows)
    shape = table.shape

    def back(g):
        src = np.repeat(np.arange(idx.shape[0]), idx.shape[1])
        return (scatter_rows(idx, g, shape[0], weights=w, src=src),)

    return _emit("bag_mean", out, (table,), back)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.value.size
    return _emit("mean", np.asarray(a.value.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def row_sq_norm(a: Tensor) -> Tensor:
    """Per-row squared Euclidean norm, shape (n,)."""
    av = a.value
    return _emit("row_sq_norm", (av * av).sum(axis=1), (a,), lambda g: (2.0 * av * g[:, None],))


# --------------------------------------------------------------- normalisation

def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Normalise by batch statistics. Returns (out, batch_mean, unbiased_var)."""
    xv = x.value
    n = xv.shape[0]
    mu = xv.mean(axis=0)
    var = xv.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    gv = gamma.value

    def back(g):
        dbeta = g.sum(axis=0)
        dgamma = (g * xhat).sum(axis=0)
        dxhat = g * gv
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    out = _emit("batchnorm_train", xhat * gv + beta.value, (x, gamma, beta), back)
    return out, mu, var * n / (n - 1)


def batchnorm_infer(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray,
                    eps: float) -> Tensor:
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mean) * inv
    gv = gamma.value
    return _emit("batchnorm_infer", xhat * gv + beta.value, (x, gamma, beta),
                 lambda g: (g * gv * inv, (g * xhat).sum(axis=0), g.sum(axis=0)))


# ---------------------------------------------------------------------- losses

def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy from raw logits, stable for large |z|."""
    z = logits.value.reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if z.size == 0:
        raise ValueError("bce on empty input")
    if z.shape != y.shape:
        raise ValueError(f"logits/labels length mismatch {z.shape} vs {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be binary")
    # -[y log s(z) + (1-y) log(1-s(z))] = max(z,0) - z*y + log(1+exp(-|z|))
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    shape = logits.shape
    n = z.size

    def back(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return ((g * (sig - y) / n).reshape(shape),)

    return _emit("bce", np.asarray(loss.mean()), (logits,), back)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z))
