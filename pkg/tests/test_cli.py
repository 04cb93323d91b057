import json

import pytest

from digrec.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main

SMALL = {"world": {"n_users": 200, "n_items": 16, "exposures_per_user": 15, "seed": 2},
         "train": {"L": 2, "K": 4, "d": 8, "enc_hidden": 8, "mixer_hidden": [8], "u2t_hidden": 8,
                   "batch_size": 64, "epochs": 1, "beam_width": 8, "top_n": 10, "eval_users": 30,
                   "kmeans_rounds": 3}}


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "conf.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


@pytest.fixture
def trained_run(tmp_path, conf):
    out = tmp_path / "run"
    assert main(["--config", conf, "--out-dir", str(out), "train"]) == EXIT_OK
    return out


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE


def test_unknown_variant_is_usage_error(tmp_path, conf):
    assert main(["--config", conf, "--out-dir", str(tmp_path), "ablate", "nope"]) == EXIT_USAGE


def test_eval_without_checkpoint_names_artifact(tmp_path, conf, capsys):
    code = main(["--config", conf, "--out-dir", str(tmp_path), "eval",
                 "--checkpoint", str(tmp_path / "missing")])
    assert code == EXIT_DATA
    assert "params.bin" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "nope.json"), "train"]) == EXIT_DATA


def test_train_is_reproducible(tmp_path, conf, trained_run):
    other = tmp_path / "again"
    assert main(["--config", conf, "--out-dir", str(other), "train"]) == EXIT_OK
    assert (trained_run / "metrics.jsonl").read_bytes() == (other / "metrics.jsonl").read_bytes()


def test_resolved_config_reconstructs_run(tmp_path, trained_run):
    resolved = json.loads((trained_run / "resolved_config.json").read_text())
    assert resolved["command"] == "train"
    assert resolved["train"]["K"] == 4 and resolved["world"]["n_users"] == 200
    replay = tmp_path / "replay.json"
    replay.write_text(json.dumps({"preset": "full", "train": resolved["train"],
                                  "world": resolved["world"]}))
    out = tmp_path / "replayed"
    assert main(["--config", str(replay), "--out-dir", str(out), "train"]) == EXIT_OK
    assert (out / "metrics.jsonl").read_bytes() == (trained_run / "metrics.jsonl").read_bytes()


def test_tokenize_twice_identical(tmp_path, conf, trained_run):
    tables = []
    for name in ("t1", "t2"):
        out = tmp_path / name
        assert main(["--config", conf, "--out-dir", str(out), "tokenize",
                     "--checkpoint", str(trained_run)]) == EXIT_OK
        tables.append((out / "sid_table.tsv").read_text())
    assert tables[0] == tables[1]
    assert tables[0].startswith("# digrec-sid-table v1 L=2 K=4")


def test_eval_and_search(tmp_path, conf, trained_run, capsys):
    out = tmp_path / "ev"
    assert main(["--config", conf, "--out-dir", str(out), "eval", "--checkpoint", str(trained_run)]) == 0
    rep = json.loads((out / "eval.json").read_text())
    assert {"rank_auc", "recall_auc", "recall@10"} <= set(rep["metrics"])
    assert rep["split"] == "test"
    capsys.readouterr()
    assert main(["--config", conf, "--out-dir", str(out), "search", "--checkpoint", str(trained_run),
                 "--limit", "3", "--top-n", "5"]) == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert len(lines) == 3
    for ln in lines:
        assert len(ln["candidates"]) <= 5 and ln["beam_width"] == 8
        assert all(c["rank_score"] is not None for c in ln["candidates"])


def test_ablate_fixed_sid_reports_both_arms(tmp_path, conf, capsys):
    out = tmp_path / "abl"
    assert main(["--config", conf, "--out-dir", str(out), "ablate", "fixed_sid", "--seeds", "0"]) == 0
    rep = json.loads((out / "ablation_fixed_sid.json").read_text())
    s = rep["summary"]["recall_auc"]
    assert set(s) == {"full", "variant", "median_delta"}
    assert s["median_delta"] == pytest.approx(s["variant"] - s["full"])
    assert "recall_auc" in capsys.readouterr().out


def test_report(tmp_path, trained_run, capsys):
    csv_path = tmp_path / "m.csv"
    assert main(["report", str(trained_run / "metrics.jsonl"), "--csv", str(csv_path)]) == 0
    text = capsys.readouterr().out
    assert "rank_auc" in text and "event" in text
    assert csv_path.read_text().splitlines()[0].startswith("event,epoch,split")
    assert main(["report", str(tmp_path / "none.jsonl")]) == EXIT_DATA


def test_generate_then_train_from_csv(tmp_path, conf):
    data_dir = tmp_path / "data"
    assert main(["--config", conf, "--out-dir", str(data_dir), "generate"]) == 0
    out = tmp_path / "fromcsv"
    assert main(["--config", conf, "--out-dir", str(out), "train", "--data", str(data_dir)]) == 0
    assert (out / "metrics.jsonl").exists()
