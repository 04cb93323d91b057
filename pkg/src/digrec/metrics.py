"""Offline metrics: AUC, Recall@K / NDCG@K, codebook health."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied pairs count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined with a single class")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def recall_ndcg_at_k(ranked: list, targets: list, k: int) -> tuple[float, float]:
    """Single-target Recall@K and NDCG@K averaged over users."""
    if k <= 0:
        raise ValueError("K must be positive")
    if not ranked:
        return 0.0, 0.0
    hits, gains = 0.0, 0.0
    for cands, tgt in zip(ranked, targets):
        top = list(cands[:k])
        if tgt in top:
            pos = top.index(tgt) + 1
            hits += 1.0
            gains += 1.0 / np.log2(1.0 + pos)
    n = len(ranked)
    return hits / n, gains / n


def collision_rate(sid_table: np.ndarray) -> float:
    if len(sid_table) == 0:
        return 0.0
    distinct = len(np.unique(sid_table, axis=0))
    return 1.0 - distinct / len(sid_table)


def utilization(sid_table: np.ndarray, K: int) -> list[float]:
    return [len(np.unique(sid_table[:, l])) / K for l in range(sid_table.shape[1])]


@dataclass
class MetricReport:
    """Named scalar metrics plus where they came from."""

    metrics: dict[str, float]
    checkpoint: str = ""
    split: str = "test"
    seed: int = 0
    timestamp: str = ""

    def __post_init__(self):
        for k, v in self.metrics.items():
            v = float(v)
            if not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite")
            if ("auc" in k or k.startswith(("recall@", "ndcg@"))) and not 0.0 <= v <= 1.0:
                raise ValueError(f"metric {k}={v} outside [0, 1]")
            self.metrics[k] = v

    def to_dict(self) -> dict:
        return {"checkpoint": self.checkpoint, "split": self.split, "seed": self.seed,
                "timestamp": self.timestamp, "metrics": dict(self.metrics)}


def render_table(rows: list[dict], columns: list[str] | None = None) -> str:
    """Aligned plain-text table from a list of flat dicts."""
    if not rows:
        return ""
    columns = columns or list(dict.fromkeys(k for r in rows for k in r))

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "" if v is None else str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
