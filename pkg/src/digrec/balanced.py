"""Balanced K-Means tree used to seed the residual codebooks collision-free."""

from __future__ import annotations

import numpy as np


def balanced_assign(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Capacity-constrained assignment of rows of ``X`` to centroids ``C``.

    Items are processed in order of decreasing margin (second-nearest minus
    nearest distance), each taking its nearest centroid that still has room.
    With ``q, r = divmod(n, K)`` every centroid holds ``q`` items and exactly
    ``r`` of them hold one more, so sizes never differ by more than one.
    """
    n, K = X.shape[0], C.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    dist = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    prefs = np.argsort(dist, axis=1, kind="stable")
    if K > 1:
        srt = np.take_along_axis(dist, prefs[:, :2], axis=1)
        margin = srt[:, 1] - srt[:, 0]
    else:
        margin = np.zeros(n)
    order = np.argsort(-margin, kind="stable")

    q, r = divmod(n, K)
    size = np.zeros(K, dtype=np.int64)
    n_big = 0
    labels = np.empty(n, dtype=np.int64)
    for i in order:
        for k in prefs[i]:
            s = size[k]
            if s < q:
                break
            if s == q and n_big < r:
                n_big += 1
                break
        else:  # pragma: no cover - capacities sum to n
            raise RuntimeError("balanced assignment ran out of capacity")
        labels[i] = k
        size[k] += 1
    return labels


def balanced_kmeans_tree(E: np.ndarray, L: int, K: int, rng: np.random.Generator,
                         rounds: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Recursive balanced partition of ``E`` into an L-level residual code tree.

    Returns ``(vectors, codes)`` with ``vectors`` of shape (L, K, d) and
    ``codes`` of shape (N, L). Each level shares one set of K centroids across
    all parent nodes; the balanced assignment runs independently inside each
    parent, which is what keeps every leaf holding at most one item when
    ``N <= K**L``.
    """
    E = np.asarray(E, dtype=np.float64)
    N, d = E.shape
    if N < 1:
        raise ValueError("balanced init needs at least one item")
    if N > K ** L:
        raise ValueError(f"{N} items cannot be collision-free in a {K}^{L} SID space")

    vectors = np.zeros((L, K, d))
    codes = np.zeros((N, L), dtype=np.int64)
    node = np.zeros(N, dtype=np.int64)
    R = E.copy()
    for level in range(L):
        seed_rows = rng.choice(N, size=K, replace=N < K)
        C = R[seed_rows].copy()
        groups = _group_members(node)
        labels = np.zeros(N, dtype=np.int64)
        for _ in range(rounds):
            for members in groups:
                labels[members] = balanced_assign(R[members], C)
            counts = np.bincount(labels, minlength=K)
            sums = np.zeros((K, d))
            np.add.at(sums, labels, R)
            used = counts > 0
            C[used] = sums[used] / counts[used, None]
        codes[:, level] = labels
        vectors[level] = C
        R = R - C[labels]
        node = node * K + labels
    return vectors, codes


def _group_members(node: np.ndarray) -> list[np.ndarray]:
    order = np.argsort(node, kind="stable")
    _, starts = np.unique(node[order], return_index=True)
    return np.split(order, starts[1:])
