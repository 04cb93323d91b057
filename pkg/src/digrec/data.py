"""Interaction data: synthetic world, temporal split, prefix u2i features, samples.

Row order of :class:`Log` is (timestamp, sequence number). All point-in-time
features use events with timestamp strictly below the query time.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import sigmoid
from .mixer import UserBatch

SCHEMA_VERSION = 1
CTR_PRIOR_A = 1.0
CTR_PRIOR_B = 10.0
D_C = 6


class DataError(ValueError):
    pass


@dataclass
class SyntheticWorldConfig:
    n_users: int = 10_000
    n_items: int = 2_000
    n_item_fields: int = 6
    item_field_card: int = 12
    n_user_fields: int = 4
    user_field_card: int = 10
    n_ctx: int = 4
    latent_dim: int = 6
    exposures_per_user: int = 30
    noise: float = 0.5            # std of Gaussian noise on the click logit
    positive_rate: float = 0.2
    logit_scale: float = 3.0
    history_boost: float = 1.5    # logit bonus for re-exposure of a clicked item
    repeat_prob: float = 0.3
    content_noise: float = 0.3
    exposure_temp: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError("positive_rate must lie in (0, 1)")


@dataclass
class Log:
    user: np.ndarray
    item: np.ndarray
    ts: np.ndarray
    label: np.ndarray
    ctx: np.ndarray

    def __len__(self):
        return len(self.user)

    def take(self, idx) -> "Log":
        return Log(self.user[idx], self.item[idx], self.ts[idx], self.label[idx], self.ctx[idx])


def sort_log(log: Log) -> Log:
    """Stable order by timestamp; equal timestamps keep their input sequence."""
    order = np.argsort(log.ts, kind="stable")
    return log.take(order)


@dataclass
class Dataset:
    item_fields: np.ndarray          # (N, F) categorical ids
    item_cards: list[int]
    user_fields: np.ndarray          # (U, P)
    user_cards: list[int]
    n_ctx: int
    log: Log
    category_field: int = 0
    item_ids: np.ndarray | None = None
    user_ids: np.ndarray | None = None
    oracle_logit: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_items(self) -> int:
        return self.item_fields.shape[0]

    @property
    def n_users(self) -> int:
        return self.user_fields.shape[0]

    @property
    def item_category(self) -> np.ndarray:
        return self.item_fields[:, self.category_field]

    @property
    def n_user_field_values(self) -> int:
        return int(sum(self.user_cards)) + self.n_ctx

    def user_field_rows(self, users: np.ndarray, ctx: np.ndarray) -> np.ndarray:
        offs = np.concatenate([[0], np.cumsum(self.user_cards)]).astype(np.int64)
        prof = self.user_fields[users] + offs[:-1]
        return np.concatenate([prof, (offs[-1] + ctx)[:, None]], axis=1)

    def u2i_index(self) -> "U2iIndex":
        if "u2i" not in self._cache:
            self._cache["u2i"] = U2iIndex(self.log, self.item_category)
        return self._cache["u2i"]

    def u2i(self) -> np.ndarray:
        if "u2i_rows" not in self._cache:
            self._cache["u2i_rows"] = build_u2i(self.log, self.item_category)
        return self._cache["u2i_rows"]

    def history(self, H: int) -> tuple[np.ndarray, np.ndarray]:
        key = ("hist", H)
        if key not in self._cache:
            self._cache[key] = build_history(self.log, H)
        return self._cache[key]

    def user_batch(self, rows: np.ndarray, H: int) -> UserBatch:
        hist, mask = self.history(H)
        return UserBatch(self.user_field_rows(self.log.user[rows], self.log.ctx[rows]),
                         hist[rows], mask[rows])


# ------------------------------------------------------------------ synthetic

def _bin_projection(latent: np.ndarray, n_fields: int, card: int, noise: float,
                    rng: np.random.Generator) -> np.ndarray:
    k = latent.shape[1]
    out = np.empty((latent.shape[0], n_fields), dtype=np.int64)
    for f in range(n_fields):
        w = rng.normal(size=k)
        w /= np.linalg.norm(w)
        s = latent @ w + noise * rng.normal(size=latent.shape[0])
        edges = np.quantile(s, np.linspace(0, 1, card + 1)[1:-1])
        out[:, f] = np.searchsorted(edges, s)
    return out


def generate_synthetic(cfg: SyntheticWorldConfig) -> Dataset:
    """Latent-factor world with content-correlated item fields and history-dependent clicks.

    ``Dataset.oracle_logit`` holds the noise-free click logit per log row, i.e.
    the Bayes scorer built from the true latents.
    """
    rng = np.random.default_rng(cfg.seed)
    k = cfg.latent_dim
    U = rng.normal(size=(cfg.n_users, k))
    V = rng.normal(size=(cfg.n_items, k))
    item_fields = _bin_projection(V, cfg.n_item_fields, cfg.item_field_card, cfg.content_noise, rng)
    user_fields = _bin_projection(U, cfg.n_user_fields, cfg.user_field_card, cfg.content_noise, rng)
    ctx_effect = rng.normal(0.0, 0.3, size=cfg.n_ctx)
    cat = item_fields[:, 0]

    T = cfg.exposures_per_user
    n_u = cfg.n_users
    fresh = np.empty((n_u, T), dtype=np.int64)
    draws = rng.random((n_u, T))
    for lo in range(0, n_u, 1000):
        logits = cfg.exposure_temp * (U[lo:lo + 1000] @ V.T) / np.sqrt(k)
        logits -= logits.max(axis=1, keepdims=True)
        cdf = np.cumsum(np.exp(logits), axis=1)
        cdf /= cdf[:, -1:]
        for j in range(cdf.shape[0]):
            fresh[lo + j] = np.minimum(np.searchsorted(cdf[j], draws[lo + j]), cfg.n_items - 1)

    def affinity(users, its):
        return (U[users] * V[its]).sum(axis=1) / np.sqrt(k)

    sample_aff = affinity(np.repeat(np.arange(n_u), T), fresh.ravel())
    bias = _calibrate_bias(cfg.logit_scale * sample_aff, cfg.noise, cfg.positive_rate, rng)

    repeat = rng.random((n_u, T)) < cfg.repeat_prob
    pick = rng.random((n_u, T))
    ctx = rng.integers(0, cfg.n_ctx, size=(n_u, T))
    eps = rng.normal(size=(n_u, T))
    coin = rng.random((n_u, T))
    ts = np.sort(rng.integers(0, 10 * T * 1000, size=(n_u, T)), axis=1) + np.arange(T)

    items = np.empty((n_u, T), dtype=np.int64)
    labels = np.empty((n_u, T), dtype=np.int64)
    oracle = np.empty((n_u, T))
    clicked_item = np.zeros((n_u, cfg.n_items), dtype=bool)
    clicked_cat = np.zeros((n_u, cfg.item_field_card), dtype=bool)
    rows = np.arange(n_u)
    for t in range(T):
        it = fresh[:, t].copy()
        if t > 0:
            rep = repeat[:, t]
            j = np.minimum((pick[:, t] * t).astype(np.int64), t - 1)
            it[rep] = items[rep, j[rep]]
        z = (cfg.logit_scale * affinity(rows, it)
             + cfg.history_boost * clicked_item[rows, it]
             + 0.5 * cfg.history_boost * clicked_cat[rows, cat[it]]
             + ctx_effect[ctx[:, t]] + bias)
        y = coin[:, t] < sigmoid(z + cfg.noise * eps[:, t])
        items[:, t] = it
        labels[:, t] = y
        oracle[:, t] = z
        clicked_item[rows[y], it[y]] = True
        clicked_cat[rows[y], cat[it[y]]] = True

    log = Log(np.repeat(rows, T), items.ravel(), ts.ravel(), labels.ravel(), ctx.ravel())
    order = np.lexsort((np.tile(np.arange(T), n_u), log.user, log.ts))
    log = log.take(order)
    return Dataset(item_fields, [cfg.item_field_card] * cfg.n_item_fields,
                   user_fields, [cfg.user_field_card] * cfg.n_user_fields, cfg.n_ctx, log,
                   item_ids=np.arange(cfg.n_items), user_ids=np.arange(n_u),
                   oracle_logit=oracle.ravel()[order])


def _calibrate_bias(z: np.ndarray, noise: float, rate: float, rng: np.random.Generator) -> float:
    eps = rng.normal(size=z.shape)
    lo, hi = -30.0, 30.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if sigmoid(z + noise * eps + mid).mean() > rate:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


# ------------------------------------------------------------------ features

class U2iIndex:
    """Point-in-time u2i queries over a log.

    For a query (u, v, t) it counts the user's impressions and clicks on v and
    on v's category among events with timestamp < t.
    """

    def __init__(self, log: Log, item_category: np.ndarray):
        self.n_items = int(max(item_category.shape[0], 1))
        self.item_category = np.asarray(item_category)
        self.n_cat = int(self.item_category.max()) + 1 if len(self.item_category) else 1
        self.times = np.unique(log.ts)
        T = len(self.times) + 1
        self.T = T
        t_rank = np.searchsorted(self.times, log.ts)
        self._item = self._table(log.user.astype(np.int64) * self.n_items + log.item, t_rank, log.label)
        cat_key = log.user.astype(np.int64) * self.n_cat + self.item_category[log.item]
        self._cat = self._table(cat_key, t_rank, log.label)

    def _table(self, key, t_rank, label):
        comp = key * self.T + t_rank
        order = np.argsort(comp, kind="stable")
        cum = np.concatenate([[0], np.cumsum(label[order])])
        return comp[order], cum

    def _count(self, table, key, t_rank):
        comp, cum = table
        lo = np.searchsorted(comp, key * self.T, side="left")
        hi = np.searchsorted(comp, key * self.T + t_rank, side="left")
        return (hi - lo).astype(np.float64), (cum[hi] - cum[lo]).astype(np.float64)

    def query(self, users, items, ts) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        t_rank = np.searchsorted(self.times, np.asarray(ts), side="left")
        imp, clk = self._count(self._item, users * self.n_items + items, t_rank)
        cimp, cclk = self._count(self._cat, users * self.n_cat + self.item_category[items], t_rank)
        a, b = CTR_PRIOR_A, CTR_PRIOR_B
        return np.stack([imp, clk, (clk + a) / (imp + a + b),
                         cimp, cclk, (cclk + a) / (cimp + a + b)], axis=1)


def build_u2i(log: Log, item_category: np.ndarray) -> np.ndarray:
    """(n, 6) prefix-accumulated u2i features for every log row."""
    return U2iIndex(log, item_category).query(log.user, log.item, log.ts)


def u2i_bruteforce(log: Log, item_category: np.ndarray, row: int) -> np.ndarray:
    """Reference u2i for one row by scanning all strictly earlier events of the user."""
    u, v, t = log.user[row], log.item[row], log.ts[row]
    mask = (log.user == u) & (log.ts < t)
    same = mask & (log.item == v)
    samec = mask & (item_category[log.item] == item_category[v])
    imp, clk = same.sum(), log.label[same].sum()
    cimp, cclk = samec.sum(), log.label[samec].sum()
    a, b = CTR_PRIOR_A, CTR_PRIOR_B
    return np.array([imp, clk, (clk + a) / (imp + a + b), cimp, cclk, (cclk + a) / (cimp + a + b)],
                    dtype=np.float64)


def build_history(log: Log, H: int) -> tuple[np.ndarray, np.ndarray]:
    """Last ``H`` clicked items per row from strictly earlier events; (n, H) ids + mask."""
    n = len(log)
    clicks = np.nonzero(log.label == 1)[0]
    c_order = clicks[np.lexsort((clicks, log.ts[clicks], log.user[clicks]))]
    c_user, c_ts = log.user[c_order], log.ts[c_order]
    c_item = log.item[c_order]
    # clicks of the row's user with ts < row ts
    T = np.int64(log.ts.max()) + 2 if n else 1
    comp = c_user.astype(np.int64) * T + c_ts
    start = np.searchsorted(comp, log.user.astype(np.int64) * T, side="left")
    end = np.searchsorted(comp, log.user.astype(np.int64) * T + log.ts, side="left")
    pos = end[:, None] - H + np.arange(H)[None, :]
    mask = pos >= start[:, None]
    hist = np.where(mask, c_item[np.clip(pos, 0, max(len(c_item) - 1, 0))] if len(c_item) else 0, 0)
    return hist.astype(np.int64), mask.astype(np.float64)


# --------------------------------------------------------------------- split

@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    eval_users: np.ndarray
    val_target: np.ndarray    # log row of each eval user's second-to-last click
    test_target: np.ndarray   # log row of each eval user's last click


def temporal_split(log: Log) -> Split:
    """Per-user time split around the last two clicks.

    Users with at least three clicks are evaluated: rows before their
    second-to-last click go to train, rows from that click up to (excluding)
    the last click go to val, the rest to test. Other users are train only.
    """
    n = len(log)
    if n == 0:
        raise DataError("empty interaction log")
    rows = np.arange(n)
    pos = rows[log.label == 1]
    pos = pos[np.lexsort((pos, log.user[pos]))]      # by user, then log order
    users, start, count = np.unique(log.user[pos], return_index=True, return_counts=True)
    ok = count >= 3
    eval_users = users[ok]
    test_target = pos[start[ok] + count[ok] - 1]
    val_target = pos[start[ok] + count[ok] - 2]

    n_users = int(log.user.max()) + 1
    t_val = np.full(n_users, np.iinfo(np.int64).max)
    t_test = np.full(n_users, np.iinfo(np.int64).max)
    t_val[eval_users] = log.ts[val_target]
    t_test[eval_users] = log.ts[test_target]
    tu = log.ts
    in_val = (tu >= t_val[log.user]) & (tu < t_test[log.user])
    in_test = tu >= t_test[log.user]
    in_train = ~(in_val | in_test)
    return Split(rows[in_train], rows[in_val], rows[in_test], eval_users, val_target, test_target)


# ------------------------------------------------------------------- samples

def sample_negatives(pos_items: np.ndarray, n_items: int, k: int,
                     rng: np.random.Generator) -> np.ndarray:
    """(n, k) uniform catalog items, never equal to the row's positive."""
    if n_items < k + 1:
        raise DataError(f"catalog of {n_items} items cannot supply {k} negatives per positive")
    pos_items = np.asarray(pos_items, dtype=np.int64)
    if k == 0:
        return np.zeros((len(pos_items), 0), dtype=np.int64)
    draw = rng.integers(0, n_items - 1, size=(len(pos_items), k))
    return draw + (draw >= pos_items[:, None])


@dataclass
class SampleSet:
    rank_rows: np.ndarray      # log rows for ranking (every exposure)
    ret_rows: np.ndarray       # log rows of retrieval positives


def build_samples(data: Dataset, split: Split, neg_per_pos: int) -> SampleSet:
    if data.n_items < neg_per_pos + 1:
        raise DataError(f"catalog of {data.n_items} items cannot supply {neg_per_pos} negatives")
    train = np.sort(split.train)
    return SampleSet(train, train[data.log.label[train] == 1])


# ------------------------------------------------------------------- CSV I/O

def write_csv_dataset(data: Dataset, out: Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    F, P = data.item_fields.shape[1], data.user_fields.shape[1]
    item_ids = data.item_ids if data.item_ids is not None else np.arange(data.n_items)
    user_ids = data.user_ids if data.user_ids is not None else np.arange(data.n_users)
    with open(out / "items.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", *[f"field_{f + 1}" for f in range(F)]])
        for iid, row in zip(item_ids, data.item_fields):
            w.writerow([int(iid), *map(int, row)])
    with open(out / "users.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", *[f"field_{f + 1}" for f in range(P)]])
        for uid, row in zip(user_ids, data.user_fields):
            w.writerow([int(uid), *map(int, row)])
    lg = data.log
    with open(out / "log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "timestamp", "label", "ctx"])
        for u, v, t, y, c in zip(user_ids[lg.user], item_ids[lg.item], lg.ts, lg.label, lg.ctx):
            w.writerow([int(u), int(v), int(t), int(y), int(c)])
    meta = {"schema_version": SCHEMA_VERSION, "item_cards": list(map(int, data.item_cards)),
            "user_cards": list(map(int, data.user_cards)), "n_ctx": int(data.n_ctx),
            "category_field": int(data.category_field)}
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def read_csv_dataset(path: Path) -> Dataset:
    """Load items.csv / log.csv (and users.csv, meta.json when present)."""
    path = Path(path)
    for name in ("items.csv", "log.csv"):
        if not (path / name).exists():
            raise DataError(f"missing {path / name}")
    items = np.loadtxt(path / "items.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    item_ids, item_fields = items[:, 0], items[:, 1:]
    raw = np.loadtxt(path / "log.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    if raw.shape[0] == 0:
        raise DataError("empty interaction log")
    labels = raw[:, 3]
    if not np.all((labels == 0) | (labels == 1)):
        raise DataError("log.csv labels must be 0/1")
    if (path / "users.csv").exists():
        users = np.loadtxt(path / "users.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        user_ids, user_fields = users[:, 0], users[:, 1:]
    else:
        user_ids = np.unique(raw[:, 0])
        user_fields = np.zeros((len(user_ids), 1), dtype=np.int64)
    meta = json.loads((path / "meta.json").read_text()) if (path / "meta.json").exists() else {}
    item_pos = {int(i): j for j, i in enumerate(item_ids)}
    user_pos = {int(u): j for j, u in enumerate(user_ids)}
    try:
        li = np.array([item_pos[int(v)] for v in raw[:, 1]], dtype=np.int64)
        lu = np.array([user_pos[int(u)] for u in raw[:, 0]], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"log references unknown id {exc}") from None
    ctx = raw[:, 4] if raw.shape[1] > 4 else np.zeros(len(raw), dtype=np.int64)
    log = sort_log(Log(lu, li, raw[:, 2], labels, ctx))
    item_cards = meta.get("item_cards") or [int(c) for c in item_fields.max(axis=0) + 1]
    user_cards = meta.get("user_cards") or [int(c) for c in user_fields.max(axis=0) + 1]
    return Dataset(item_fields, item_cards, user_fields, user_cards,
                   int(meta.get("n_ctx", int(ctx.max()) + 1)), log,
                   category_field=int(meta.get("category_field", 0)),
                   item_ids=item_ids, user_ids=user_ids)


def world_config_dict(cfg: SyntheticWorldConfig) -> dict:
    return asdict(cfg)
