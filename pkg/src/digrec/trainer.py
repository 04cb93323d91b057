"""Joint objective, the end-to-end training loop, checkpoints and ablation arms."""

from __future__ import annotations

import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset, SampleSet, Split, build_samples, sample_negatives, temporal_split
from .metrics import auc, collision_rate, recall_ndcg_at_k, utilization
from .mixer import UserBatch, rank_score, recall_score
from .model import TrainConfig, DigModel
from .optim import AdamState, adam_step
from .retrieval import beam_search, build_index
from .serialize import read_blob, read_sid_table, write_blob, write_sid_table
from .tokenizer import (balanced_kmeans_init, commit_loss, ema_update, quantize, restart_dead_codes,
                        sem_loss, tokenize_catalog)
from .u2t import U2tStats, batch_u2t, distill_loss, level_targets, predict_u2t, u2t_prefix

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "DigModel", "TrainingBatch", "DivergenceError", "joint_loss", "Trainer",
           "evaluate", "save_checkpoint", "load_checkpoint", "ablation_run", "VARIANTS",
           "recall_rank_gap", "codebook_report", "train_run"]

CHECKPOINT_VERSION = 1
TERMS = ("rank", "recall", "commit", "sem", "u2t")


class DivergenceError(RuntimeError):
    """Training produced a non-finite or exploding loss."""

    def __init__(self, msg: str, term: str | None = None):
        super().__init__(msg)
        self.term = term


@dataclass
class TrainingBatch:
    """One ranking sub-batch and one retrieval sub-batch (positives then negatives)."""

    rank_users: UserBatch
    rank_items: np.ndarray
    rank_c: np.ndarray
    rank_y: np.ndarray
    ret_users: UserBatch
    ret_items: np.ndarray
    ret_c: np.ndarray
    ret_y: np.ndarray

    def __post_init__(self):
        if len(self.rank_items) == 0 and len(self.ret_items) == 0:
            raise ValueError("empty training batch")


@dataclass
class LossOutput:
    total: Tensor
    terms: dict[str, float]
    trace: object = None
    recall_by_depth: dict[int, float] = field(default_factory=dict)
    parts: dict[str, Tensor] = field(default_factory=dict)   # unweighted term tensors


def _check_term(name: str, t: Tensor) -> None:
    v = float(t.value)
    if not np.isfinite(v):
        raise DivergenceError(f"loss term {name} is not finite ({v})", term=name)


def joint_loss(batch: TrainingBatch, model: DigModel, cfg: TrainConfig, item_fields: np.ndarray,
               recall_depths: list[int] | None = None, train: bool = True) -> LossOutput:
    """total = rank + w * recall + l1 * commit + l2 * sem + l3 * u2t.

    ``recall_depths`` overrides which prefix depths the recall BCE averages over;
    by default every depth (or only the last with ``final_layer_only``).
    """
    L, K = cfg.L, cfg.K
    # ranking path
    e_u_rank = model.user_tower(batch.rank_users)
    e_v = model.encoder(item_fields[batch.rank_items])
    trace = quantize(e_v.value, model.codebook)
    l_rank = ad.bce_with_logits(rank_score(e_u_rank, e_v, batch.rank_c, model.mixer, train),
                                batch.rank_y)
    l_commit = commit_loss(e_v, trace)
    l_sem = sem_loss(e_v, trace)

    # teacher statistics over every sample of the step, keyed by the step's codes
    if cfg.fixed_sid:
        codes_rank = model.sid_table[batch.rank_items]
        codes_ret = model.sid_table[batch.ret_items]
    else:
        codes_rank = trace.codes
        e_ret = model.encoder(item_fields[batch.ret_items]).value
        codes_ret = quantize(e_ret, model.codebook).codes
    teacher = batch_u2t(np.concatenate([codes_rank, codes_ret]),
                        np.concatenate([batch.rank_c, batch.ret_c]), K)

    # retrieval path
    e_u = model.user_tower(batch.ret_users)
    prefixes = model.sid_emb.prefixes(codes_ret)
    preds = [predict_u2t(ad.stop_gradient(e_u), ad.stop_gradient(prefixes[l]), l + 1, model.student)
             for l in range(L)]
    l_u2t = distill_loss(preds, level_targets(teacher, codes_ret))

    if recall_depths is None:
        recall_depths = [L] if cfg.final_layer_only else list(range(1, L + 1))
    w = cfg.recall_loss_weight
    depth_loss: dict[int, Tensor] = {}
    if w != 0.0 and recall_depths:
        if cfg.no_train_u2i:
            cum = np.cumsum(np.stack([p.value for p in preds]), axis=0)
            u2t_in = [cum[l - 1] / l for l in recall_depths]
        else:
            u2t_in = [u2t_prefix(teacher, codes_ret[:, :l]) for l in recall_depths]
        logits = recall_score(ad.concat([e_u] * len(recall_depths), axis=0),
                              ad.concat([prefixes[l - 1] for l in recall_depths], axis=0),
                              np.concatenate(u2t_in), model.mixer, train)
        n = len(batch.ret_items)
        depth_loss = {l: ad.bce_with_logits(ad.take_rows(logits, np.arange(i * n, (i + 1) * n)),
                                            batch.ret_y) for i, l in enumerate(recall_depths)}
        # equal-sized slices, so the mean of per-depth losses is the stacked BCE
        l_recall = depth_loss[recall_depths[0]]
        for l in recall_depths[1:]:
            l_recall = l_recall + depth_loss[l]
        l_recall = ad.scale(l_recall, 1.0 / len(recall_depths))
    else:
        l_recall = Tensor(np.array(0.0))

    named = {"rank": l_rank, "recall": l_recall, "commit": l_commit, "sem": l_sem, "u2t": l_u2t}
    for k, t in named.items():
        _check_term(k, t)
    total = (l_rank + ad.scale(l_recall, w) + ad.scale(l_commit, cfg.lambda1)
             + ad.scale(l_sem, cfg.lambda2) + ad.scale(l_u2t, cfg.lambda3))
    _check_term("total", total)
    parts = {**named, **{f"recall@{l}": t for l, t in depth_loss.items()}}
    return LossOutput(total, {k: float(t.value) for k, t in named.items()}, trace,
                      {l: float(t.value) for l, t in depth_loss.items()}, parts)


def weighted_total(terms: dict[str, float], cfg: TrainConfig) -> float:
    return (terms["rank"] + cfg.recall_loss_weight * terms["recall"] + cfg.lambda1 * terms["commit"]
            + cfg.lambda2 * terms["sem"] + cfg.lambda3 * terms["u2t"])


# ------------------------------------------------------------------ training

class Trainer:
    """Owns the model, optimizer state and sample streams for one run."""

    def __init__(self, data: Dataset, cfg: TrainConfig, split: Split | None = None,
                 out_dir: Path | None = None, validate: bool = True):
        self.data, self.cfg = data, cfg
        self.validate = validate
        self.split = split if split is not None else temporal_split(data.log)
        self.samples: SampleSet = build_samples(data, self.split, cfg.neg_per_pos)
        self.rng = np.random.default_rng(cfg.seed)
        self.model = DigModel(cfg, data.item_cards, data.n_user_field_values, data.n_items,
                              np.random.default_rng([cfg.seed, 1]))
        self.adam = AdamState(lr=cfg.lr)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.epoch = 0
        self.history: list[dict] = []
        self._u2i = data.u2i()
        self.initialize_sids()

    # SID maintenance -------------------------------------------------------
    def initialize_sids(self) -> None:
        E = self.model.item_embeddings(self.data.item_fields)
        N = E.shape[0]
        if N <= self.cfg.K ** self.cfg.L:
            table = balanced_kmeans_init(E, self.model.codebook, np.random.default_rng([self.cfg.seed, 2]),
                                         rounds=self.cfg.kmeans_rounds)
        else:
            raise ValueError(f"catalog of {N} items exceeds K^L = {self.cfg.K ** self.cfg.L} leaves")
        self.model.sid_table = table
        self.refresh_stat_u2t()

    def retokenize(self) -> None:
        if self.cfg.fixed_sid:
            return
        self.model.sid_table = tokenize_catalog(self.model.encoder, self.model.codebook,
                                                self.data.item_fields)

    def refresh_stat_u2t(self) -> None:
        rows = self.samples.rank_rows
        self.model.stat_u2t = batch_u2t(self.model.sid_table[self.data.log.item[rows]],
                                        self._u2i[rows], self.cfg.K)

    # batches ---------------------------------------------------------------
    def _epoch_batches(self):
        cfg, data, lg = self.cfg, self.data, self.data.log
        rank_rows = self.rng.permutation(self.samples.rank_rows)
        ret_rows = self.rng.permutation(self.samples.ret_rows)
        negs = sample_negatives(lg.item[ret_rows], data.n_items, cfg.neg_per_pos, self.rng)
        neg_c = data.u2i_index().query(np.repeat(lg.user[ret_rows], cfg.neg_per_pos), negs.ravel(),
                                       np.repeat(lg.ts[ret_rows], cfg.neg_per_pos))
        neg_c = neg_c.reshape(len(ret_rows), cfg.neg_per_pos, -1)
        half = max(cfg.batch_size // 2, 2)
        per_ret = max(half // (1 + cfg.neg_per_pos), 1)
        n_steps = max(len(rank_rows) // half, 1)
        H = cfg.history_len
        for step in range(n_steps):
            rr = rank_rows[step * half:(step + 1) * half]
            j = (np.arange(per_ret) + step * per_ret) % len(ret_rows)
            pos = ret_rows[j]
            k = cfg.neg_per_pos
            ret_log_rows = np.concatenate([pos, np.repeat(pos, k)])
            ret_items = np.concatenate([lg.item[pos], negs[j].ravel()])
            ret_c = np.concatenate([self._u2i[pos], neg_c[j].reshape(-1, neg_c.shape[2])])
            ret_y = np.concatenate([np.ones(len(pos)), np.zeros(len(pos) * k)])
            yield TrainingBatch(data.user_batch(rr, H), lg.item[rr], self._u2i[rr],
                                lg.label[rr].astype(np.float64),
                                data.user_batch(ret_log_rows, H), ret_items, ret_c, ret_y)

    # steps -----------------------------------------------------------------
    def train_step(self, batch: TrainingBatch) -> dict[str, float]:
        cfg, model = self.cfg, self.model
        model.zero_grad()
        try:
            with Tape() as tape:
                out = joint_loss(batch, model, cfg, self.data.item_fields)
        except ad.NonFiniteError as exc:
            raise DivergenceError(str(exc)) from None
        total = float(out.total.value)
        if total > cfg.divergence_limit:
            raise DivergenceError(f"loss {total:.4g} exceeds {cfg.divergence_limit:g}", term="total")
        tape.backward(out.total)
        try:
            adam_step(model.named_params(), self.adam)
        except FloatingPointError as exc:
            raise DivergenceError(str(exc), term="gradient") from None
        if not cfg.fixed_sid:
            tr = out.trace
            ema_update(model.codebook, tr.codes, tr.residuals[:-1])
            restart_dead_codes(model.codebook, tr.residuals[:-1], self.rng,
                               cfg.dead_code_threshold, cfg.dead_code_grace)
        return {**out.terms, "total": total}

    def train_epoch(self) -> dict:
        """One pass over the ranking rows, then retokenize and evaluate on validation."""
        snapshot = self.snapshot()
        sums: dict[str, float] = {}
        n = 0
        first = None
        try:
            for batch in self._epoch_batches():
                terms = self.train_step(batch)
                first = first if first is not None else terms["total"]
                for k, v in terms.items():
                    sums[k] = sums.get(k, 0.0) + v
                n += 1
        except DivergenceError:
            self.restore(snapshot)
            raise
        self.epoch += 1
        self.retokenize()
        self.refresh_stat_u2t()
        train_metrics = {k: v / max(n, 1) for k, v in sums.items()}
        train_metrics.update(steps=n, first_step_loss=first,
                             codebook_utilization=utilization(self.model.sid_table, self.cfg.K),
                             collision_rate=collision_rate(self.model.sid_table))
        self.emit({"event": "train", "epoch": self.epoch, "split": "train", "metrics": train_metrics})
        if not self.validate:
            return {"train": train_metrics}
        val = evaluate(self.model, self.data, self.split, self.cfg, which="val")
        self.emit({"event": "eval", "epoch": self.epoch, "split": "val", "metrics": val})
        return {"train": train_metrics, "val": val}

    def fit(self) -> list[dict]:
        out = []
        for _ in range(self.cfg.epochs):
            out.append(self.train_epoch())
        return out

    def emit(self, event: dict) -> None:
        self.history.append(event)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with open(self.out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")

    # state -----------------------------------------------------------------
    def snapshot(self) -> dict:
        m = self.model
        return {"arrays": {k: v.copy() for k, v in m.state_arrays().items()},
                "codebook": m.codebook.copy(), "sid_table": m.sid_table.copy(),
                "adam": (dict((k, v.copy()) for k, v in self.adam.m.items()),
                         dict((k, v.copy()) for k, v in self.adam.v.items()), self.adam.step)}

    def restore(self, snap: dict) -> None:
        m = self.model
        m.load_state_arrays(snap["arrays"])
        m.codebook = snap["codebook"].copy()
        m.sid_table = snap["sid_table"].copy()
        self.adam.m, self.adam.v, self.adam.step = snap["adam"]
        self.refresh_stat_u2t()


# ---------------------------------------------------------------- evaluation

def score_rows(model: DigModel, data: Dataset, rows: np.ndarray, cfg: TrainConfig,
               u2t_mode: str = "mlp", chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """Rank-path and depth-L recall-path logits for log rows, inference mode."""
    rank, recall = [], []
    u2i = data.u2i()
    for s in range(0, len(rows), chunk):
        r = rows[s:s + chunk]
        ub = data.user_batch(r, cfg.history_len)
        items = data.log.item[r]
        e_u = model.user_tower(ub)
        e_v = model.encoder(data.item_fields[items])
        rank.append(rank_score(e_u, e_v, u2i[r], model.mixer, train=False).value[:, 0])
        codes = model.sid_table[items]
        prefixes = model.sid_emb.prefixes(codes)
        if u2t_mode == "mlp":
            acc = sum(predict_u2t(e_u, prefixes[l], l + 1, model.student).value
                      for l in range(model.L))
            u2t = acc / model.L
        else:
            u2t = u2t_prefix(model.stat_u2t, codes)
        recall.append(recall_score(e_u, prefixes[-1], u2t, model.mixer, train=False).value[:, 0])
    return np.concatenate(rank), np.concatenate(recall)


def evaluate(model: DigModel, data: Dataset, split: Split, cfg: TrainConfig, which: str = "test",
             u2t_mode: str | None = None) -> dict:
    """Rank/recall AUC over the window rows and beam-search R@K / NDCG@K on target clicks."""
    if u2t_mode is None:
        u2t_mode = "stat" if cfg.no_infer_mlp_u2t else "mlp"
    rows = split.test if which == "test" else split.val
    targets = split.test_target if which == "test" else split.val_target
    y = data.log.label[rows]
    rank_s, recall_s = score_rows(model, data, rows, cfg, u2t_mode)
    out = {"rank_auc": auc(rank_s, y), "recall_auc": auc(recall_s, y)}
    out["gap"] = out["recall_auc"] - out["rank_auc"]
    pick = np.random.default_rng([cfg.seed, 7]).permutation(len(targets))[:cfg.eval_users]
    trows = np.sort(targets[pick])
    index = build_index(model.sid_table, cfg.K)
    res = beam_search(model, data.user_batch(trows, cfg.history_len), index, cfg.beam_width,
                      cfg.top_n, u2t_mode=u2t_mode, accumulate=cfg.accumulate_beam_scores,
                      prune=cfg.beam_pruning)
    ranked = [r.items for r in res]
    tgt = data.log.item[trows]
    k = cfg.eval_k
    r_k, n_k = recall_ndcg_at_k([list(x) for x in ranked], list(tgt), k)
    out[f"recall@{k}"], out[f"ndcg@{k}"] = float(r_k), float(n_k)
    out[f"recall@{cfg.top_n}"] = float(recall_ndcg_at_k([list(x) for x in ranked], list(tgt), cfg.top_n)[0])
    out["collision_rate"] = collision_rate(model.sid_table)
    out["n_rows"] = int(len(rows))
    out["n_users"] = int(len(trows))
    return out


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: Path, trainer_or_model, cfg: TrainConfig, extra: dict | None = None) -> None:
    """Write params, codebook, SID table and config into ``path`` as one unit.

    Files are staged in a sibling directory which then replaces ``path``, so
    a reader never sees a SID table from one step with a mixer from another.
    """
    model = trainer_or_model.model if isinstance(trainer_or_model, Trainer) else trainer_or_model
    path = Path(path)
    stage = path.with_name(path.name + ".staging")
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir(parents=True)
    meta = {"checkpoint_version": CHECKPOINT_VERSION}
    arrays = dict(model.state_arrays())
    if model.stat_u2t is not None:
        st = model.stat_u2t
        for l in range(st.L):
            arrays[f"stat_u2t.{l}.keys"] = st.keys[l]
            arrays[f"stat_u2t.{l}.sums"] = st.sums[l]
            arrays[f"stat_u2t.{l}.counts"] = st.counts[l]
    write_blob(stage / "params.bin", "params", meta, arrays)
    cb = model.codebook
    write_blob(stage / "codebook.bin", "codebook", {**meta, "step": cb.step, "alpha": cb.alpha},
               {"vectors": cb.vectors.value, "ema_counts": cb.ema_counts, "ema_sums": cb.ema_sums,
                "born": cb.born})
    write_sid_table(stage / "sid_table.tsv", np.arange(len(model.sid_table)), model.sid_table, cfg.K)
    conf = {"checkpoint_version": CHECKPOINT_VERSION, "train": cfg.to_dict(), **(extra or {})}
    (stage / "config.json").write_text(json.dumps(conf, indent=2, sort_keys=True) + "\n")
    if path.exists():
        # keep run files the checkpoint does not own (metrics log, resolved config)
        for f in path.iterdir():
            if f.is_file() and not (stage / f.name).exists():
                shutil.copy2(f, stage / f.name)
    old = path.with_name(path.name + ".old")
    if path.exists():
        os.replace(path, old)
    os.replace(stage, path)
    if old.exists():
        shutil.rmtree(old)


def load_checkpoint(path: Path, data: Dataset) -> tuple[DigModel, TrainConfig, dict]:
    path = Path(path)
    for name in ("params.bin", "codebook.bin", "sid_table.tsv", "config.json"):
        if not (path / name).exists():
            raise FileNotFoundError(f"checkpoint is missing {path / name}")
    conf = json.loads((path / "config.json").read_text())
    cfg = TrainConfig.from_dict(conf["train"])
    model = DigModel(cfg, data.item_cards, data.n_user_field_values, data.n_items,
                     np.random.default_rng(0))
    _, arrays = read_blob(path / "params.bin", "params")
    model.load_state_arrays(arrays)
    if "stat_u2t.0.keys" in arrays:
        model.stat_u2t = U2tStats(cfg.K, *[[arrays[f"stat_u2t.{l}.{k}"] for l in range(cfg.L)]
                                           for k in ("keys", "sums", "counts")])
    cmeta, cb = read_blob(path / "codebook.bin", "codebook")
    model.codebook.vectors.value[...] = cb["vectors"]
    model.codebook.ema_counts[...] = cb["ema_counts"]
    model.codebook.ema_sums[...] = cb["ema_sums"]
    model.codebook.born[...] = cb["born"]
    model.codebook.step = int(cmeta["step"])
    _, table = read_sid_table(path / "sid_table.tsv")
    if table.shape != model.sid_table.shape:
        raise ValueError(f"SID table shape {table.shape} does not match catalog {model.sid_table.shape}")
    model.sid_table = table
    return model, cfg, conf


def train_run(data: Dataset, cfg: TrainConfig, out_dir: Path | None = None,
              split: Split | None = None) -> Trainer:
    """Train for ``cfg.epochs`` and emit a final test evaluation; checkpoint if ``out_dir``."""
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.jsonl").write_text("")
    tr = Trainer(data, cfg, split, out_dir)
    try:
        tr.fit()
    finally:
        if out_dir is not None:
            save_checkpoint(out_dir, tr, cfg)
    test = evaluate(tr.model, data, tr.split, cfg, which="test")
    tr.emit({"event": "eval", "epoch": tr.epoch, "split": "test", "metrics": test})
    return tr


# ----------------------------------------------------------------- ablations

# variant -> (training overrides, evaluation u2t mode)
VARIANTS: dict[str, tuple[dict, str]] = {
    "fixed_sid": ({"fixed_sid": True}, "mlp"),
    "no_train_u2i": ({"no_train_u2i": True}, "mlp"),
    "no_infer_mlp_u2t": ({}, "stat"),
    "no_both": ({"no_train_u2i": True}, "stat"),
    "final_layer_only": ({"final_layer_only": True}, "mlp"),
    "rank_only": ({"recall_loss_weight": 0.0}, "mlp"),
}


def ablation_run(data: Dataset, cfg: TrainConfig, variant: str, seeds: list[int] | None = None,
                 cache: dict | None = None) -> dict:
    """Train the full model and ``variant`` on identical data per seed and report deltas.

    ``cache`` maps (variant training overrides, seed) to trained models so
    arms sharing a training configuration are trained once.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; choose from {', '.join(VARIANTS)}")
    seeds = [cfg.seed] if seeds is None else list(seeds)
    cache = {} if cache is None else cache
    split = temporal_split(data.log)
    overrides, mode = VARIANTS[variant]
    rows = []
    for seed in seeds:
        full = _arm_metrics(data, cfg, {}, "mlp", seed, split, cache)
        var = _arm_metrics(data, cfg, overrides, mode, seed, split, cache)
        rows.append({"seed": seed, "full": full, "variant": var,
                     "delta": {k: var[k] - full[k] for k in full if isinstance(full[k], float)}})
    keys = [k for k in rows[0]["delta"]]
    summary = {k: {"full": float(np.median([r["full"][k] for r in rows])),
                   "variant": float(np.median([r["variant"][k] for r in rows])),
                   "median_delta": float(np.median([r["delta"][k] for r in rows]))} for k in keys}
    return {"variant": variant, "seeds": seeds, "runs": rows, "summary": summary}


def _arm_metrics(data, cfg, overrides, mode, seed, split, cache):
    key = (tuple(sorted(overrides.items())), seed)
    if key not in cache:
        arm_cfg = cfg.replace(seed=seed, **overrides)
        cache[key] = Trainer(data, arm_cfg, split, validate=False)
        cache[key].fit()
    tr = cache[key]
    mkey = ("metrics", key, mode)
    if mkey not in cache:
        cache[mkey] = evaluate(tr.model, data, split, tr.cfg, which="test", u2t_mode=mode)
    return cache[mkey]


# ------------------------------------------------------------------- reports

def recall_rank_gap(model: DigModel, data: Dataset, split: Split, cfg: TrainConfig,
                    which: str = "test", u2t_mode: str = "mlp") -> tuple[float, float, float]:
    """(rank AUC, depth-L recall AUC, recall - rank) over the same labeled rows."""
    rows = split.test if which == "test" else split.val
    rank_s, recall_s = score_rows(model, data, rows, cfg, u2t_mode)
    y = data.log.label[rows]
    r, c = auc(rank_s, y), auc(recall_s, y)
    return r, c, c - r


def codebook_report(model: DigModel, item_fields: np.ndarray) -> dict:
    """Per-layer code usage of the stored table, its collision rate, and the mean
    residual norm after each layer under a fresh quantization of the catalog."""
    E = model.item_embeddings(item_fields)
    tr = quantize(E, model.codebook)
    return {"utilization": utilization(model.sid_table, model.K),
            "collision_rate": collision_rate(model.sid_table),
            "recon_error": [float(x) for x in tr.recon_error.mean(axis=1)]}
