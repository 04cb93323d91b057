"""Command-line entry point: ``digrec <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 data or artifact error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (DataError, SyntheticWorldConfig, generate_synthetic, read_csv_dataset,
                   temporal_split, world_config_dict, write_csv_dataset)
from .metrics import MetricReport, render_table
from .model import TrainConfig
from .retrieval import beam_search, build_index, rank_candidates
from .serialize import CorruptBlobError, write_sid_table
from .tokenizer import tokenize_catalog
from .trainer import (VARIANTS, DivergenceError, ablation_run, codebook_report, evaluate,
                      load_checkpoint, train_run)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("digrec")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------- config

def load_config(args) -> tuple[TrainConfig, SyntheticWorldConfig]:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file {path} not found")
        raw = json.loads(path.read_text())
        unknown = set(raw) - {"preset", "train", "world"}
        if unknown:
            raise UsageError(f"unknown config sections: {', '.join(sorted(unknown))}")
    preset = getattr(args, "preset", None) or raw.get("preset", "desk")
    train_over = dict(raw.get("train", {}))
    if preset == "desk":
        cfg = TrainConfig.desk(**train_over)
    elif preset == "full":
        cfg = TrainConfig.from_dict(train_over)
    else:
        raise UsageError(f"unknown preset {preset!r} (desk or full)")
    for flag in ("epochs", "beam_width", "top_n"):
        val = getattr(args, flag, None)
        if val is not None:
            cfg = cfg.replace(**{flag: val})
    world = SyntheticWorldConfig(**raw.get("world", {}))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
        world = SyntheticWorldConfig(**{**world_config_dict(world), "seed": args.seed})
    return cfg, world


def write_resolved(out_dir: Path, command: str, cfg: TrainConfig | None, world, extra=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "train": cfg.to_dict() if cfg else None,
           "world": world_config_dict(world) if world else None, **(extra or {})}
    (out_dir / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_data(args, world: SyntheticWorldConfig):
    if getattr(args, "data", None):
        return read_csv_dataset(Path(args.data))
    return generate_synthetic(world)


# ----------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    _, world = load_config(args)
    overrides = {k: getattr(args, k) for k in ("n_users", "n_items", "noise")
                 if getattr(args, k) is not None}
    world = SyntheticWorldConfig(**{**world_config_dict(world), **overrides})
    data = generate_synthetic(world)
    out = Path(args.out_dir)
    write_csv_dataset(data, out)
    write_resolved(out, "generate", None, world)
    print(json.dumps({"out_dir": str(out), "items": data.n_items, "users": data.n_users,
                      "events": len(data.log)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, world = load_config(args)
    data = load_data(args, world)
    out = Path(args.out_dir)
    write_resolved(out, "train", cfg, None if args.data else world, {"data": args.data})
    tr = train_run(data, cfg, out)
    print(json.dumps(tr.history[-1], sort_keys=True))
    return EXIT_OK


def _checkpoint(args, world):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    data = load_data(args, world)
    model, cfg, conf = load_checkpoint(Path(args.checkpoint), data)
    return data, model, cfg


def cmd_tokenize(args) -> int:
    _, world = load_config(args)
    data, model, cfg = _checkpoint(args, world)
    table = tokenize_catalog(model.encoder, model.codebook, data.item_fields)
    ids = data.item_ids if data.item_ids is not None else np.arange(data.n_items)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_sid_table(out / "sid_table.tsv", ids, table, cfg.K)
    index = build_index(table, cfg.K, ids, version=str(args.checkpoint))
    write_resolved(out, "tokenize", cfg, None, {"checkpoint": str(args.checkpoint)})
    print(json.dumps({"items": int(len(table)), "distinct_sids": int(len(index.leaf_keys)),
                      "collision_rate": index.collision_rate}))
    return EXIT_OK


def cmd_eval(args) -> int:
    _, world = load_config(args)
    data, model, cfg = _checkpoint(args, world)
    split = temporal_split(data.log)
    if args.beam_width is not None:
        cfg = cfg.replace(beam_width=args.beam_width)
    m = evaluate(model, data, split, cfg, which=args.split,
                 u2t_mode="stat" if args.stat_u2t else None)
    m.update({f"codebook_{k}": v for k, v in codebook_report(model, data.item_fields).items()
              if k == "collision_rate"})
    rep = MetricReport({k: v for k, v in m.items() if isinstance(v, (int, float))},
                       checkpoint=str(args.checkpoint), split=args.split, seed=cfg.seed,
                       timestamp="final")
    out = Path(args.out_dir)
    write_resolved(out, "eval", cfg, None, {"checkpoint": str(args.checkpoint), "split": args.split})
    (out / "eval.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_search(args) -> int:
    _, world = load_config(args)
    data, model, cfg = _checkpoint(args, world)
    split = temporal_split(data.log)
    B = args.beam_width or cfg.beam_width
    top_n = args.top_n or cfg.top_n
    ids = data.item_ids if data.item_ids is not None else np.arange(data.n_items)
    uids = data.user_ids if data.user_ids is not None else np.arange(data.n_users)
    rows = split.test_target
    if args.users:
        want = {int(u) for u in args.users.split(",")}
        rows = np.array([r for r in rows if int(uids[data.log.user[r]]) in want], dtype=np.int64)
    rows = rows[:args.limit]
    index = build_index(model.sid_table, cfg.K, ids)
    users = data.user_batch(rows, cfg.history_len)
    mode = "stat" if args.stat_u2t else "mlp"
    results = beam_search(model, users, index, B, top_n, u2t_mode=mode,
                          accumulate=cfg.accumulate_beam_scores, trace=True)
    qidx = data.u2i_index()
    for i, (row, res) in enumerate(zip(rows, results)):
        u, t = data.log.user[row], data.log.ts[row]
        ranked = dict(rank_candidates(model, users.take([i]), res.items,
                                      lambda it: qidx.query(np.full(len(it), u), it, np.full(len(it), t)),
                                      data.item_fields, ids)) if len(res.items) else {}
        cands = [{"item_id": int(ids[it]), "beam_score": float(s), "rank_score": ranked.get(int(it))}
                 for it, s in zip(res.items, res.beam_scores)]
        sys.stdout.write(json.dumps({"user_id": int(uids[u]), "candidates": cands, "beam_width": B,
                                     "short_supply": res.short_supply,
                                     "depth_trace": res.depth_trace}) + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, world = load_config(args)
    if args.variant not in VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; choose from {', '.join(VARIANTS)}")
    data = load_data(args, world)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rep = ablation_run(data, cfg, args.variant, seeds)
    out = Path(args.out_dir)
    write_resolved(out, "ablate", cfg, None if args.data else world,
                   {"variant": args.variant, "seeds": seeds})
    (out / f"ablation_{args.variant}.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    rows = [{"metric": k, **v} for k, v in rep["summary"].items()]
    print(f"ablation {args.variant} (median over seeds {seeds})")
    print(render_table(rows, ["metric", "full", "variant", "median_delta"]))
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.metrics)
    if not path.exists():
        raise DataError(f"metrics file {path} not found")
    rows = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        ev = json.loads(line)
        flat = {k: v for k, v in ev["metrics"].items() if isinstance(v, (int, float))}
        rows.append({"event": ev["event"], "epoch": ev["epoch"], "split": ev["split"], **flat})
    cols = list(dict.fromkeys(k for r in rows for k in r))
    if args.csv:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
        Path(args.csv).write_text(buf.getvalue())
    print(render_table(rows, cols))
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="digrec", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config with optional 'preset', 'train' and 'world' sections")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def data_opts(sp):
        sp.add_argument("--data", help="directory with items.csv/log.csv; synthetic world if omitted")

    g = sub.add_parser("generate", help="write a synthetic dataset as CSV")
    g.add_argument("--n-users", type=int)
    g.add_argument("--n-items", type=int)
    g.add_argument("--noise", type=float)

    t = sub.add_parser("train", help="train and checkpoint into --out-dir")
    data_opts(t)
    t.add_argument("--preset", choices=["desk", "full"])
    t.add_argument("--epochs", type=int)

    for name, helptext in (("tokenize", "rebuild the SID table and index from a checkpoint"),
                           ("eval", "offline metrics for a checkpoint"),
                           ("search", "batch beam search, one JSON line per request")):
        sp = sub.add_parser(name, help=helptext)
        data_opts(sp)
        sp.add_argument("--checkpoint")
        if name in ("eval", "search"):
            sp.add_argument("--beam-width", type=int)
            sp.add_argument("--stat-u2t", action="store_true",
                            help="use stored bucket means instead of the u2t student")
        if name == "eval":
            sp.add_argument("--split", choices=["val", "test"], default="test")
        if name == "search":
            sp.add_argument("--top-n", type=int)
            sp.add_argument("--users", help="comma-separated user ids (default: evaluated users)")
            sp.add_argument("--limit", type=int, default=100)

    a = sub.add_parser("ablate", help="train full and variant arms and report deltas")
    data_opts(a)
    a.add_argument("variant")
    a.add_argument("--seeds", help="comma-separated seeds")
    a.add_argument("--preset", choices=["desk", "full"])
    a.add_argument("--epochs", type=int)

    r = sub.add_parser("report", help="render metrics.jsonl as a table")
    r.add_argument("metrics")
    r.add_argument("--csv")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "tokenize": cmd_tokenize,
            "eval": cmd_eval, "search": cmd_search, "ablate": cmd_ablate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"digrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, CorruptBlobError) as exc:
        print(f"digrec: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"digrec: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_exit()
