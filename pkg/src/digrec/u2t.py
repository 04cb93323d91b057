"""Token-bucket aggregation of u2i features and the per-layer u2t student."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import MLP, Module
from .tokenizer import prefix_ids

log = logging.getLogger(__name__)


@dataclass
class U2tStats:
    """Per-layer bucket sums/counts keyed by integer prefix id (sorted)."""

    K: int
    keys: list[np.ndarray]
    sums: list[np.ndarray]
    counts: list[np.ndarray]

    @property
    def L(self) -> int:
        return len(self.keys)

    def bucket(self, layer: int, prefix: tuple[int, ...]):
        """(sum, count) for the 1-based ``layer`` bucket at ``prefix``, or None."""
        pid = 0
        for s in prefix[:layer]:
            pid = pid * self.K + int(s)
        keys = self.keys[layer - 1]
        j = np.searchsorted(keys, pid)
        if j < len(keys) and keys[j] == pid:
            return self.sums[layer - 1][j], int(self.counts[layer - 1][j])
        return None

    def level_means(self, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bucket means at every level for (n, l) codes.

        Returns ``(means, found)`` with shapes (l, n, d_c) and (l, n).
        """
        codes = np.atleast_2d(codes)
        pids = prefix_ids(codes, self.K)
        n, l = codes.shape
        d_c = self.sums[0].shape[1]
        means = np.zeros((l, n, d_c))
        found = np.zeros((l, n), dtype=bool)
        for i in range(l):
            keys = self.keys[i]
            j = np.searchsorted(keys, pids[:, i])
            jc = np.minimum(j, max(len(keys) - 1, 0))
            hit = (j < len(keys)) & (keys[jc] == pids[:, i]) if len(keys) else np.zeros(n, bool)
            found[i] = hit
            means[i, hit] = self.sums[i][jc[hit]] / self.counts[i][jc[hit], None]
        return means, found


def batch_u2t(codes: np.ndarray, c_uv: np.ndarray, K: int) -> U2tStats:
    """Mean u2i vector over samples sharing each code prefix, at every layer."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
    c_uv = np.asarray(c_uv, dtype=np.float64)
    pids = prefix_ids(codes, K)
    keys, sums, counts = [], [], []
    for i in range(codes.shape[1]):
        k, inv = np.unique(pids[:, i], return_inverse=True)
        s = ad.scatter_rows(inv, c_uv, len(k))
        keys.append(k)
        sums.append(s)
        counts.append(np.bincount(inv, minlength=len(k)))
    return U2tStats(K, keys, sums, counts)


def u2t_prefix(stats: U2tStats, codes: np.ndarray) -> np.ndarray:
    """Cumulative u2t for (n, l) code prefixes: mean of the level means for levels 1..l.

    An empty level falls back to the deepest populated ancestor; with no
    populated ancestor the result is the zero vector.
    """
    codes = np.atleast_2d(codes)
    means, found = stats.level_means(codes)
    l, n, d_c = means.shape
    last = np.zeros((n, d_c))
    have = np.zeros(n, dtype=bool)
    acc = np.zeros((n, d_c))
    for i in range(l):
        last = np.where(found[i][:, None], means[i], last)
        have |= found[i]
        acc += last
    if not have.all():
        log.warning("u2t prefix: %d rows have no populated ancestor bucket", int((~have).sum()))
    return acc / l


def level_targets(stats: U2tStats, codes: np.ndarray) -> np.ndarray:
    """(L, n, d_c) bucket mean at each level's own prefix; every in-batch row is found."""
    means, found = stats.level_means(codes)
    if not found.all():
        raise ValueError("teacher statistics are missing buckets for in-batch samples")
    return means


class U2tStudent(Module):
    """One 2-layer MLP per depth mapping [e_u; e_sid^(1:l)] to a d_c vector."""

    def __init__(self, L: int, d_user: int, d_item: int, d_c: int, hidden: int,
                 rng: np.random.Generator, zero_last: bool = True):
        self.mlps = [MLP([d_user + d_item, hidden, d_c], rng, zero_last=zero_last, name=f"u2t.{l}")
                     for l in range(L)]


def predict_u2t(u_emb: Tensor, prefix_emb: Tensor, layer: int, p: U2tStudent) -> Tensor:
    """Student prediction at 1-based ``layer``."""
    if not 1 <= layer <= len(p.mlps):
        raise ValueError(f"layer {layer} outside 1..{len(p.mlps)}")
    return p.mlps[layer - 1](ad.concat([ad._wrap(u_emb), ad._wrap(prefix_emb)]))


def distill_loss(preds: list[Tensor], targets) -> Tensor:
    """(1/L) sum_l mean_batch |pred_l - sg[target_l]|^2."""
    total = None
    for pred, tgt in zip(preds, targets):
        teacher = ad.stop_gradient(ad._wrap(tgt))
        term = ad.mean_all(ad.row_sq_norm(pred - teacher))
        total = term if total is None else total + term
    return ad.scale(total, 1.0 / len(preds))
