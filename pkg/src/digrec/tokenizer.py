"""Item encoder, residual quantizer with EMA codebooks, and the SID embedding table.

Codebook vectors only address items. They are kept out of every gradient
path: reads go through ``stop_gradient`` and the backing ``Param`` is frozen,
so its ``.grad`` stays exactly zero. SID embeddings are ordinary trainable
parameters and never touch assignment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .balanced import balanced_kmeans_tree
from .layers import MLP, Module

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ItemRecord:
    item_id: int
    static_features: tuple[tuple[int, int], ...]  # (field id, value id)


class Encoder(Module):
    """Sum of per-field embeddings followed by a 2-layer MLP to ``d`` dims.

    Each field table has one extra trailing row used for out-of-vocabulary values.
    """

    def __init__(self, field_cards: list[int], d: int, hidden: int, rng: np.random.Generator):
        self.field_cards = list(field_cards)
        self.offsets = np.concatenate([[0], np.cumsum([c + 1 for c in field_cards])[:-1]]).astype(np.int64)
        total = int(sum(c + 1 for c in field_cards))
        self.d = d
        self.table = Param(rng.normal(0.0, 0.1, size=(total, d)), "encoder.table")
        self.mlp = MLP([d, hidden, d], rng, name="encoder.mlp")

    def rows(self, values: np.ndarray) -> np.ndarray:
        """Map raw (n, F) value ids to table rows, routing unknown values to OOV."""
        values = np.asarray(values, dtype=np.int64)
        if values.ndim != 2 or values.shape[1] != len(self.field_cards):
            raise ValueError(f"expected (n, {len(self.field_cards)}) field values, got {values.shape}")
        cards = np.asarray(self.field_cards)
        safe = np.where((values >= 0) & (values < cards), values, cards)
        return safe + self.offsets

    def __call__(self, values: np.ndarray) -> Tensor:
        idx = self.rows(values)
        F = idx.shape[1]
        summed = ad.scale(ad.bag_mean(self.table, idx, np.ones(idx.shape)), float(F))
        return self.mlp(summed)


def encode_item(rec: ItemRecord, enc: Encoder) -> np.ndarray:
    F = len(enc.field_cards)
    row = np.full(F, -1, dtype=np.int64)
    for fid, val in rec.static_features:
        if not 0 <= fid < F:
            raise KeyError(f"item {rec.item_id}: unknown field id {fid}")
        row[fid] = val
    return enc(row[None, :]).value[0]


class Codebook:
    """L x K addressing vectors maintained by exponential moving average."""

    def __init__(self, L: int, K: int, d: int, alpha: float = 0.99,
                 rng: np.random.Generator | None = None):
        self.L, self.K, self.d, self.alpha = L, K, d, alpha
        init = np.zeros((L, K, d)) if rng is None else rng.normal(0.0, 0.1, size=(L, K, d))
        self.vectors = Param(init, "codebook.vectors", trainable=False)
        self.ema_counts = np.zeros((L, K))
        self.ema_sums = np.zeros((L, K, d))
        self.born = np.zeros((L, K), dtype=np.int64)
        self.step = 0

    def copy(self) -> "Codebook":
        cb = Codebook(self.L, self.K, self.d, self.alpha)
        cb.vectors.value[...] = self.vectors.value
        cb.ema_counts[...] = self.ema_counts
        cb.ema_sums[...] = self.ema_sums
        cb.born[...] = self.born
        cb.step = self.step
        return cb


@dataclass
class QuantizationTrace:
    codes: np.ndarray       # (n, L)
    residuals: np.ndarray   # (L+1, n, d); residuals[0] is the input
    quantized: np.ndarray   # (L, n, d) chosen codebook vectors
    prefix: np.ndarray      # (L, n, d) running sums of ``quantized``

    @property
    def recon_error(self) -> np.ndarray:
        """(L+1, n) residual norms; row l is the error after l layers."""
        return np.linalg.norm(self.residuals, axis=2)


def quantize(e: np.ndarray, cb: Codebook) -> QuantizationTrace:
    """Residual quantization by nearest code per layer; ties go to the lowest index."""
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    n = e.shape[0]
    L = cb.L
    vec = cb.vectors.value
    codes = np.empty((n, L), dtype=np.int64)
    residuals = np.empty((L + 1, n, cb.d))
    quantized = np.empty((L, n, cb.d))
    prefix = np.empty((L, n, cb.d))
    r = e
    acc = np.zeros_like(e)
    residuals[0] = r
    for l in range(L):
        dist = ((r[:, None, :] - vec[l][None, :, :]) ** 2).sum(axis=2)
        s = np.argmin(dist, axis=1)
        q = vec[l][s]
        codes[:, l] = s
        quantized[l] = q
        r = r - q
        acc = acc + q
        residuals[l + 1] = r
        prefix[l] = acc
    return QuantizationTrace(codes, residuals, quantized, prefix)


def ema_update(cb: Codebook, codes: np.ndarray, residuals_in: np.ndarray) -> None:
    """One EMA step from a batch of assignments.

    residuals_in: (L, n, d), the residual entering each layer. Codes not hit
    this step keep their vectors; every count decays so dead codes show up.
    """
    a = cb.alpha
    for l in range(cb.L):
        s = codes[:, l]
        counts = np.bincount(s, minlength=cb.K).astype(np.float64)
        sums = ad.scatter_rows(s, residuals_in[l], cb.K)
        hit = counts > 0
        mean = sums[hit] / counts[hit, None]
        cb.vectors.value[l, hit] = a * cb.vectors.value[l, hit] + (1.0 - a) * mean
        cb.ema_counts[l] = a * cb.ema_counts[l] + (1.0 - a) * counts
        cb.ema_sums[l] = a * cb.ema_sums[l] + (1.0 - a) * sums
    cb.step += 1


def restart_dead_codes(cb: Codebook, pool: np.ndarray, rng: np.random.Generator,
                       threshold: float = 1e-3, grace: int = 200) -> int:
    """Reset codes whose EMA count fell below ``threshold`` after ``grace`` steps.

    pool: (L, m, d) recent residuals entering each layer. Returns the number restarted.
    """
    if pool.shape[1] == 0:
        raise ValueError("restart pool is empty")
    dead = (cb.ema_counts < threshold) & (cb.step - cb.born >= grace)
    n = int(dead.sum())
    if n == 0:
        return 0
    for l, k in zip(*np.nonzero(dead)):
        cb.vectors.value[l, k] = pool[l, rng.integers(pool.shape[1])]
        cb.ema_counts[l, k] = 1.0
        cb.ema_sums[l, k] = cb.vectors.value[l, k]
        cb.born[l, k] = cb.step
    log.info("restarted %d dead codes at step %d", n, cb.step)
    return n


def balanced_kmeans_init(E: np.ndarray, cb: Codebook, rng: np.random.Generator,
                         rounds: int = 10) -> np.ndarray:
    """Seed ``cb`` from the balanced tree over catalog embeddings; returns the (N, L) SID table."""
    vectors, codes = balanced_kmeans_tree(E, cb.L, cb.K, rng, rounds=rounds)
    cb.vectors.value[...] = vectors
    used = np.stack([np.bincount(codes[:, l], minlength=cb.K) > 0 for l in range(cb.L)])
    cb.ema_counts[...] = used.astype(np.float64)
    cb.ema_sums[...] = vectors * cb.ema_counts[..., None]
    cb.born[...] = cb.step
    return codes


class SidEmbeddingTable(Module):
    """L x K learnable embeddings addressed by SID codes."""

    def __init__(self, L: int, K: int, d: int, rng: np.random.Generator, std: float = 0.1):
        self.L, self.K = L, K
        self.table = Param(rng.normal(0.0, std, size=(L * K, d)), "sid_emb.table")

    def layer_rows(self, codes: np.ndarray) -> list[Tensor]:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size and (codes.min() < 0 or codes.max() >= self.K):
            raise IndexError("SID code out of range")
        return [ad.take_rows(self.table, codes[:, i] + i * self.K) for i in range(codes.shape[1])]

    def prefixes(self, codes: np.ndarray) -> list[Tensor]:
        """Prefix sums for every depth 1..codes.shape[1]."""
        out: list[Tensor] = []
        acc = None
        for row in self.layer_rows(codes):
            acc = row if acc is None else acc + row
            out.append(acc)
        return out


def sid_prefix_embedding(codes: np.ndarray, tbl: SidEmbeddingTable) -> Tensor:
    codes = np.atleast_2d(codes)
    if not 1 <= codes.shape[1] <= tbl.L:
        raise ValueError(f"prefix depth {codes.shape[1]} outside 1..{tbl.L}")
    return tbl.prefixes(codes)[-1]


def commit_loss(e: Tensor, trace: QuantizationTrace) -> Tensor:
    """Batch mean of sum_l |sg[c_{l,s_l}] - r_{l-1}|^2.

    Since c_{l,s_l} - r_{l-1} = prefix_l - e, each layer term only needs the
    stop-gradient prefix sum; the codebook never enters the tape.
    """
    total = None
    for l in range(trace.prefix.shape[0]):
        term = ad.row_sq_norm(ad.stop_gradient(Tensor(trace.prefix[l])) - e)
        total = term if total is None else total + term
    return ad.mean_all(total)


def sem_loss(e: Tensor, trace: QuantizationTrace) -> Tensor:
    """Batch mean of |e - sg[full-depth prefix]|^2, checked against |r_L|^2."""
    out = ad.mean_all(ad.row_sq_norm(e - ad.stop_gradient(Tensor(trace.prefix[-1]))))
    via_residual = float((trace.residuals[-1] ** 2).sum(axis=1).mean())
    if not np.isclose(float(out.value), via_residual, rtol=1e-9, atol=1e-12):
        raise AssertionError(f"sem loss {float(out.value)} != |r_L|^2 {via_residual}")
    return out


def tokenize_catalog(enc: Encoder, cb: Codebook, item_fields: np.ndarray,
                     chunk: int = 4096) -> np.ndarray:
    """SID table for the whole catalog against a frozen snapshot."""
    out = []
    for start in range(0, item_fields.shape[0], chunk):
        e = enc(item_fields[start:start + chunk]).value
        out.append(quantize(e, cb).codes)
    return np.concatenate(out, axis=0) if out else np.zeros((0, cb.L), dtype=np.int64)


@dataclass
class CodebookStats:
    utilization: list[float] = field(default_factory=list)
    collision_rate: float = 0.0
    recon_error: list[float] = field(default_factory=list)


def prefix_ids(codes: np.ndarray, K: int) -> np.ndarray:
    """(n, l) codes -> (n, l) integer ids of every prefix (s_1..s_i)."""
    codes = np.asarray(codes, dtype=np.int64)
    out = np.empty_like(codes)
    acc = np.zeros(codes.shape[0], dtype=np.int64)
    for i in range(codes.shape[1]):
        acc = acc * K + codes[:, i]
        out[:, i] = acc
    return out
