"""SID inverted index, layer-wise beam search and candidate re-ranking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .mixer import UserBatch, rank_score, recall_score
from .tokenizer import prefix_ids
from .u2t import predict_u2t, u2t_prefix

log = logging.getLogger(__name__)


class InvertedIndex:
    """Full SID -> items, plus per-depth sets of reachable prefixes.

    Items are stored by catalog position; ``item_ids`` maps positions to
    external ids and fixes the order inside every bucket.
    """

    def __init__(self, sid_table: np.ndarray, K: int, item_ids: np.ndarray | None = None,
                 version: str = ""):
        sid_table = np.asarray(sid_table, dtype=np.int64)
        if sid_table.ndim != 2:
            raise ValueError("SID table must be (N, L)")
        self.K = K
        self.L = sid_table.shape[1]
        self.version = version
        self.sid_table = sid_table
        n = sid_table.shape[0]
        self.item_ids = np.arange(n) if item_ids is None else np.asarray(item_ids, dtype=np.int64)
        pids = prefix_ids(sid_table, K)
        leaf = pids[:, -1] if n else np.zeros(0, dtype=np.int64)
        order = np.lexsort((self.item_ids, leaf))
        self.positions = order
        self.leaf_keys, self.starts, counts = np.unique(leaf[order], return_index=True,
                                                        return_counts=True)
        self.ends = self.starts + counts
        self.reachable = [np.unique(pids[:, i]) for i in range(self.L)]

    def __len__(self) -> int:
        return self.sid_table.shape[0]

    @property
    def collision_rate(self) -> float:
        n = len(self)
        return 0.0 if n == 0 else 1.0 - len(self.leaf_keys) / n

    def leaf_positions(self, leaf_pid: int) -> np.ndarray:
        j = np.searchsorted(self.leaf_keys, leaf_pid)
        if j < len(self.leaf_keys) and self.leaf_keys[j] == leaf_pid:
            return self.positions[self.starts[j]:self.ends[j]]
        return self.positions[:0]

    def lookup(self, sid) -> list[int]:
        """External item ids stored under a full SID."""
        pid = 0
        for s in sid:
            pid = pid * self.K + int(s)
        return [int(i) for i in self.item_ids[self.leaf_positions(pid)]]

    def as_dict(self) -> dict[tuple[int, ...], list[int]]:
        out = {}
        for key, a, b in zip(self.leaf_keys, self.starts, self.ends):
            pos = self.positions[a:b]
            out[tuple(int(s) for s in self.sid_table[pos[0]])] = [int(i) for i in self.item_ids[pos]]
        return out

    def is_reachable(self, depth: int, pids: np.ndarray) -> np.ndarray:
        keys = self.reachable[depth - 1]
        j = np.searchsorted(keys, pids)
        jc = np.minimum(j, max(len(keys) - 1, 0))
        return (j < len(keys)) & (keys[jc] == pids) if len(keys) else np.zeros(pids.shape, bool)


def build_index(sid_table: np.ndarray, K: int, item_ids: np.ndarray | None = None,
                version: str = "") -> InvertedIndex:
    return InvertedIndex(sid_table, K, item_ids, version)


@dataclass
class SearchResult:
    items: np.ndarray            # catalog positions, best first
    beam_scores: np.ndarray      # score of the leaf that produced each item
    short_supply: bool
    depth_trace: list[dict] = field(default_factory=list)


def recall_logits(model, eu: np.ndarray, pe: np.ndarray, u2t: np.ndarray) -> np.ndarray:
    return recall_score(Tensor(eu), Tensor(pe), u2t, model.mixer, train=False).value[:, 0]


def beam_search(model, users: UserBatch, index: InvertedIndex, B: int = 32, top_n: int = 100,
                u2t_mode: str = "mlp", accumulate: bool = False, prune: bool = True,
                trace: bool = False, chunk: int = 64) -> list[SearchResult]:
    """Depth-synchronous top-B expansion scored by the shared mixer's recall path.

    ``u2t_mode="mlp"`` substitutes the running mean of the per-depth student
    predictions; ``"stat"`` reads the stored bucket means in ``model.stat_u2t``.
    Beams are ordered by (-score, prefix id); by default the score at depth l
    is the depth-l logit alone.
    """
    if len(index) == 0:
        raise ValueError("cannot search an empty index")
    if B < 1 or top_n < 1:
        raise ValueError("beam width and top_n must be positive")
    if u2t_mode not in ("mlp", "stat"):
        raise ValueError(f"unknown u2t mode {u2t_mode!r}")
    if u2t_mode == "stat" and model.stat_u2t is None:
        raise ValueError("statistical u2t requested but the model stores none")
    out: list[SearchResult] = []
    for s in range(0, len(users), chunk):
        out.extend(_search_chunk(model, users.take(np.arange(s, min(s + chunk, len(users)))),
                                 index, B, top_n, u2t_mode, accumulate, prune, trace))
    return out


def _search_chunk(model, users, index, B, top_n, u2t_mode, accumulate, prune, trace):
    L, K = model.L, model.K
    d = model.sid_emb.table.shape[1]
    tbl = model.sid_emb.table.value.reshape(L, K, d)
    d_c = model.mixer.d_c
    n = len(users)
    eu = model.user_tower(users).value
    codes = np.zeros((n, 1, 0), dtype=np.int64)
    pid = np.zeros((n, 1), dtype=np.int64)
    pe = np.zeros((n, 1, d))
    u2sum = np.zeros((n, 1, d_c))
    score = np.zeros((n, 1))
    valid = np.ones((n, 1), dtype=bool)
    traces: list[list[dict]] = [[] for _ in range(n)]
    for depth in range(1, L + 1):
        b = pid.shape[1]
        cand = pid[:, :, None] * K + np.arange(K)[None, None, :]
        ok = np.broadcast_to(valid[:, :, None], cand.shape).copy()
        if prune:
            ok &= index.is_reachable(depth, cand)
        ui, bi, ki = np.nonzero(ok)
        pe_c = pe[ui, bi] + tbl[depth - 1, ki]
        if u2t_mode == "mlp":
            pred = predict_u2t(Tensor(eu[ui]), Tensor(pe_c), depth, model.student).value
            u2s = u2sum[ui, bi] + pred
            u2 = u2s / depth
        else:
            c_codes = np.concatenate([codes[ui, bi], ki[:, None]], axis=1)
            u2 = u2t_prefix(model.stat_u2t, c_codes)
            u2s = u2 * depth
        logit = recall_logits(model, eu[ui], pe_c, u2)
        val = logit + score[ui, bi] if accumulate else logit
        flat = bi * K + ki
        S = np.full((n, b * K), -np.inf)
        S[ui, flat] = val
        P = cand.reshape(n, b * K)
        order = np.lexsort((P, -S), axis=-1)[:, :B]
        rows = np.arange(n)[:, None]
        new_valid = np.isfinite(S[rows, order])
        pb, pk = order // K, order % K
        # map each kept slot back to its scored candidate row
        slot = np.full((n, b * K), -1, dtype=np.int64)
        slot[ui, flat] = np.arange(len(ui))
        sel = np.maximum(slot[rows, order], 0)
        codes = np.concatenate([codes[rows, pb], pk[:, :, None]], axis=2)
        pid = P[rows, order]
        pe = pe_c[sel] if len(ui) else np.zeros((n, order.shape[1], d))
        u2sum = u2s[sel] if len(ui) else np.zeros((n, order.shape[1], d_c))
        score = np.where(new_valid, S[rows, order], -np.inf)
        valid = new_valid
        if trace:
            for u in range(n):
                v = valid[u]
                traces[u].append({"depth": depth, "scored": int((ui == u).sum()),
                                  "beam": [[*map(int, c), float(sc)] for c, sc in
                                           zip(codes[u][v], score[u][v])]})
    results = []
    for u in range(n):
        v = valid[u]
        items, scores = [], []
        for leaf, sc in zip(pid[u][v], score[u][v]):
            pos = index.leaf_positions(int(leaf))
            items.append(pos)
            scores.append(np.full(len(pos), sc))
        items = np.concatenate(items) if items else np.zeros(0, dtype=np.int64)
        scores = np.concatenate(scores) if scores else np.zeros(0)
        order = np.lexsort((index.item_ids[items], -scores))
        items, scores = items[order], scores[order]
        short = len(items) < top_n
        results.append(SearchResult(items[:top_n], scores[:top_n], short, traces[u]))
    return results


def exhaustive_leaf_scores(model, users: UserBatch, index: InvertedIndex) -> np.ndarray:
    """(n, #leaves) depth-L logits for every indexed leaf, computed directly."""
    leaves = index.sid_table[index.positions[index.starts]]
    n, m = len(users), len(leaves)
    eu = model.user_tower(users).value
    pref = model.sid_emb.prefixes(leaves)
    ui = np.repeat(np.arange(n), m)
    acc = 0.0
    for depth in range(1, model.L + 1):
        pe = pref[depth - 1].value[np.tile(np.arange(m), n)]
        acc = acc + predict_u2t(Tensor(eu[ui]), Tensor(pe), depth, model.student).value
    pe = pref[-1].value[np.tile(np.arange(m), n)]
    return recall_logits(model, eu[ui], pe, acc / model.L).reshape(n, m)


def rank_candidates(model, user: UserBatch, candidates, c_lookup, item_fields: np.ndarray,
                    item_ids: np.ndarray | None = None) -> list[tuple[int, float]]:
    """Score candidates on the ranking path with true u2i; best first, ties by item id.

    ``c_lookup(positions) -> (n, d_c)`` supplies the point-in-time u2i features.
    Candidates outside the catalog are dropped with a warning.
    """
    cand = np.asarray(candidates, dtype=np.int64).ravel()
    if cand.size == 0:
        raise ValueError("no candidates to rank")
    n_items = item_fields.shape[0]
    known = (cand >= 0) & (cand < n_items)
    if not known.all():
        log.warning("skipping %d unknown candidate items", int((~known).sum()))
        cand = cand[known]
    if cand.size == 0:
        return []
    ids = np.arange(n_items) if item_ids is None else np.asarray(item_ids)
    eu = model.user_tower(user.take(np.zeros(len(cand), dtype=np.int64)))
    ev = model.encoder(item_fields[cand])
    c = np.asarray(c_lookup(cand), dtype=np.float64)
    s = rank_score(eu, ev, c, model.mixer, train=False).value[:, 0]
    order = np.lexsort((ids[cand], -s))
    return [(int(cand[i]), float(s[i])) for i in order]
