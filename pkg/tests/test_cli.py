from __future__ import annotations

import json

import pytest

from blockscan.cli import run_argv, stage_seed
from blockscan.detect import read_scores
from blockscan.evalkit import DetectionReport


def run(tmp_path, *argv):
    return run_argv(["--run-dir", str(tmp_path / "run"), *argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> tokenizer -> mlm and causal models at toy scale."""
    root = tmp_path_factory.mktemp("cli")
    base = ["--run-dir", str(root / "run"), "--seed", "3"]
    assert run_argv(["synth", *base, "--n-benign", "120", "--n-anomalies", "4"]) == 0
    assert run_argv(["build-tokenizer", *base, "--size-cap", "200", "--top-n", "32"]) == 0
    small = ["--d-model", "16", "--n-heads", "2", "--n-layers", "1", "--d-ff", "32", "--max-len", "256",
             "--epochs", "1", "--batch-size", "16", "--grad-accum", "1", "--warmup-epochs", "0", "--lr", "1e-3"]
    assert run_argv(["train", *base, *small]) == 0
    assert run_argv(["train", *base, *small, "--objective", "causal", "--out", "causal.ckpt",
                     "--metrics", "causal_metrics.jsonl"]) == 0
    return root / "run"


def test_stage_seed_stable():
    assert stage_seed(7, "train") == stage_seed(7, "train")
    assert stage_seed(7, "train") != stage_seed(7, "score")
    assert stage_seed(7, "train") != stage_seed(8, "train")


def test_usage_errors(tmp_path, capsys):
    assert run(tmp_path, "train", "--no-such-flag") == 1
    assert run(tmp_path, "frobnicate") == 1
    assert run(tmp_path, "score", "--workers", "0") == 1
    assert run(tmp_path, "train", "--epochs", "-1") == 1
    assert "error" in capsys.readouterr().err


def test_missing_input_is_data_error(tmp_path):
    assert run(tmp_path, "build-tokenizer", "--traces", "absent.jsonl") == 2


def test_malformed_traces_are_data_error(tmp_path):
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / "train.jsonl").write_text('{"tx_id": 5}\n')
    assert run(tmp_path, "build-tokenizer") == 2


def test_eval_counts(tmp_path, capsys):
    assert run(tmp_path, "eval", "--counts", "709", "10", "10", "8") == 0
    out = capsys.readouterr().out
    assert "80%" in out and "0.28%" in out
    r = DetectionReport.load(tmp_path / "run" / "report.json")
    assert r.entry(10).tp == 8
    assert run(tmp_path, "eval", "--counts", "709", "10", "10", "11") == 1


def test_train_zero_epochs(pipeline):
    argv = ["--run-dir", str(pipeline), "train", "--epochs", "0", "--out", "zero.ckpt", "--metrics", "zero.jsonl"]
    assert run_argv(argv) == 0
    assert (pipeline / "zero.ckpt").exists()
    assert (pipeline / "zero.jsonl").read_text() == ""


@pytest.mark.parametrize("scorer,extra", [
    ("mask_predict", ["--repeats", "2"]),
    ("length", []),
    ("kde", ["--simsiam-epochs", "3"]),
    ("gmm", ["--gmm-k", "2"]),
    ("causal_nll", ["--checkpoint", "causal.ckpt"]),
])
def test_every_scorer(pipeline, scorer, extra):
    out = f"scores_{scorer}.jsonl"
    argv = ["--run-dir", str(pipeline), "score", "--scorer", scorer, "--out", out, *extra]
    assert run_argv(argv) == 0
    scores = read_scores(pipeline / out)
    tests = [json.loads(l) for l in (pipeline / "test.jsonl").read_text().splitlines()]
    assert sorted(s.tx_id for s in scores) == sorted(t["tx_id"] for t in tests)
    rep = f"report_{scorer}.json"
    assert run_argv(["--run-dir", str(pipeline), "eval", "--scores", out, "--k", "1", "3", "--out", rep]) == 0
    r = DetectionReport.load(pipeline / rep)
    assert r.n_malicious == 4


def test_wrong_model_for_causal_scorer(pipeline):
    argv = ["--run-dir", str(pipeline), "score", "--scorer", "causal_nll", "--out", "bad.jsonl"]
    assert run_argv(argv) == 2


def test_workers_do_not_change_scores(pipeline):
    base = ["--run-dir", str(pipeline), "score", "--repeats", "2"]
    assert run_argv([*base, "--out", "w1.jsonl"]) == 0
    assert run_argv(["--workers", "3", *base, "--out", "w3.jsonl"]) == 0
    assert (pipeline / "w1.jsonl").read_bytes() == (pipeline / "w3.jsonl").read_bytes()


def test_manifest_records_stages(pipeline):
    m = json.loads((pipeline / "manifest.json").read_text())
    assert {"synth", "build-tokenizer", "train"} <= set(m["stages"])
    train = m["stages"]["train"]
    assert train["seed"] == stage_seed(3, "train") or "zero.ckpt" in train["outputs"]
    assert "numpy" in m["versions"]


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"counts": [709, 10, 10, 8], "out": "from_config.json", "seed": 11}))
    assert run(tmp_path, "eval", "--config", str(cfg)) == 0
    assert (tmp_path / "run" / "from_config.json").exists()
    m = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert m["stages"]["eval"]["params"]["seed"] == 11
    assert run(tmp_path, "--seed", "5", "eval", "--config", str(cfg), "--out", "cli.json") == 0
    assert (tmp_path / "run" / "cli.json").exists()
    m = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert m["stages"]["eval"]["params"]["seed"] == 5


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert run(tmp_path, "eval", "--config", str(bad)) == 1
    nested = tmp_path / "nested.json"
    nested.write_text(json.dumps({"out": {"a": 1}}))
    assert run(tmp_path, "eval", "--config", str(nested)) == 1
    assert run(tmp_path, "eval", "--config", str(tmp_path / "missing.json")) == 1


def test_inspect(pipeline, capsys):
    tx = json.loads((pipeline / "test.jsonl").read_text().splitlines()[0])["tx_id"]
    assert run_argv(["--run-dir", str(pipeline), "inspect", tx]) == 0
    assert "[START]" in capsys.readouterr().out
    assert run_argv(["--run-dir", str(pipeline), "inspect", "0xnope"]) == 2
