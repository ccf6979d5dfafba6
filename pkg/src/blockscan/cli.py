"""Command-line entry point: ``blockscan <command> [flags]``.

Every command writes under ``--run-dir`` and records its inputs (with
sha256 digests), outputs and effective parameters in ``manifest.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .baselines import bow_features, fit_gmm, gmm_score, length_score, projection_matrix
from .detect import (
    DetectorConfig,
    EmbedMode,
    causal_nll_score,
    embed,
    kde_score,
    mask_predict_score,
    read_scores,
    simsiam_refine,
    write_scores,
)
from .errors import BlockScanError, DataError
from .evalkit import (
    DetectionReport,
    ETHEREUM_KS,
    metrics_from_counts,
    render_table,
    report,
)
from .nn import AttentionMode, ModelConfig, Precision, load_checkpoint, save_checkpoint
from .synth import SynthConfig, gen_anomalies, gen_benign
from .tokenizer import (
    DEFAULT_SIZE_CAP,
    DEFAULT_TOP_N,
    SPECIALS_VERSION,
    Vocabulary,
    build_vocabulary,
    decode,
    encode,
)
from .trace import Label, flatten, read_traces, split_dataset, write_traces
from .train import TrainHyper, train

log = logging.getLogger("blockscan")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
SCORERS = ("mask_predict", "causal_nll", "kde", "gmm", "length")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so ``run`` owns exit codes."""

    def error(self, message: str):  # noqa: D401
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def stage_seed(global_seed: int, stage: str) -> int:
    """Per-stage seed derived from the global seed by hashing the stage name."""
    digest = hashlib.sha256(f"{global_seed}/{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# run directory bookkeeping


class Run:
    def __init__(self, root: str | Path, command: str, seed: int):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.seed = stage_seed(seed, command)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def path(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    def input(self, p: str | Path) -> Path:
        full = self.path(p)
        if not full.is_file():
            raise DataError(f"input file not found: {full}")
        self.inputs[str(p)] = file_digest(full)
        return full

    def output(self, p: str | Path) -> Path:
        full = self.path(p)
        full.parent.mkdir(parents=True, exist_ok=True)
        self.outputs[str(p)] = str(full)
        return full

    def record(self, params: dict) -> None:
        mpath = self.root / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.is_file() else {}
        manifest["versions"] = {
            "blockscan": __version__,
            "numpy": np.__version__,
            "specials": SPECIALS_VERSION,
        }
        stages = manifest.setdefault("stages", {})
        stages[self.command] = {
            "seed": self.seed,
            "params": params,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {k: file_digest(v) for k, v in sorted(self.outputs.items())},
        }
        mpath.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands


def _labels(txs) -> dict[str, Label]:
    return {t.tx_id: t.label for t in txs}


def _encode_all(txs, vocab: Vocabulary, max_len: int):
    return [encode(flatten(t), vocab, max_len, t.tx_id) for t in txs]


def cmd_synth(args, run: Run) -> dict:
    cfg = SynthConfig(n_apps=args.n_apps, addresses_per_app=args.addresses_per_app,
                      call_templates_per_app=args.templates_per_app, depth_max=args.depth_max,
                      seed=run.seed)
    txs = gen_benign(cfg, args.n_benign)
    tr, te = split_dataset(txs, args.train_fraction)
    bad = gen_anomalies(cfg, te, args.n_anomalies) if args.n_anomalies else []
    write_traces(run.output(args.train_out), tr)
    write_traces(run.output(args.test_out), te + bad)
    log.info("synth: %d train, %d test benign, %d anomalies", len(tr), len(te), len(bad))
    return {"n_train": len(tr), "n_test_benign": len(te), "n_anomalies": len(bad)}


def cmd_build_tokenizer(args, run: Run) -> dict:
    txs = read_traces(run.input(args.traces))
    vocab = build_vocabulary([flatten(t) for t in txs], args.size_cap, args.top_n,
                             args.seed_alphabet_policy)
    vocab.save(run.output(args.out))
    log.info("vocabulary: %d tokens (%d addresses)", len(vocab), len(vocab.addresses))
    return {"vocab_size": len(vocab), "n_addresses": len(vocab.addresses)}


def cmd_train(args, run: Run) -> dict:
    vocab = Vocabulary.load(run.input(args.vocab))
    txs = read_traces(run.input(args.traces))
    corpus = _encode_all(txs, vocab, args.max_len)
    mode = AttentionMode.CAUSAL if args.objective == "causal" else AttentionMode.BIDIRECTIONAL
    config = ModelConfig(vocab_size=len(vocab), d_model=args.d_model, n_heads=args.n_heads,
                         n_layers=args.n_layers, d_ff=args.d_ff, max_len=args.max_len,
                         attention_mode=mode, precision=Precision(args.precision))
    # a run shorter than the warmup simply never leaves it
    warmup = min(args.warmup_epochs, args.epochs)
    hyper = TrainHyper(base_lr=args.lr, warmup_epochs=warmup, total_epochs=args.epochs,
                       batch_size=args.batch_size, grad_accum=args.grad_accum,
                       mask_ratio=args.mask_ratio, seed=run.seed, max_len=args.max_len)
    metrics = run.path(args.metrics) if args.metrics else None
    ckpt = train(config, vocab, corpus, hyper, metrics_path=metrics)
    save_checkpoint(ckpt, run.output(args.out))
    trace = ckpt.meta["loss_trace"]
    return {"epochs": args.epochs, "objective": args.objective,
            "final_ce": trace[-1] if trace else None}


def _parallel_map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def cmd_score(args, run: Run) -> dict:
    test = read_traces(run.input(args.traces))
    scorer = args.scorer
    if scorer == "length":
        if not args.vocab:
            raise UsageError("score --scorer length requires --vocab")
        vocab = Vocabulary.load(run.input(args.vocab))
        scores = [length_score(s) for s in _encode_all(test, vocab, args.max_len)]
    elif scorer == "gmm":
        if not (args.vocab and args.train_traces):
            raise UsageError("score --scorer gmm requires --vocab and --train-traces")
        vocab = Vocabulary.load(run.input(args.vocab))
        train_seqs = _encode_all(read_traces(run.input(args.train_traces)), vocab, args.max_len)
        proj = projection_matrix(len(vocab), args.bow_dim, run.seed)
        feats = np.stack([bow_features(s, len(vocab), projection=proj) for s in train_seqs])
        params = fit_gmm(feats, K=args.gmm_k, seed=run.seed)
        scores = [gmm_score(params, bow_features(s, len(vocab), projection=proj), s.source_tx_id)
                  for s in _encode_all(test, vocab, args.max_len)]
    else:
        if not (args.vocab and args.checkpoint):
            raise UsageError(f"score --scorer {scorer} requires --vocab and --checkpoint")
        vocab = Vocabulary.load(run.input(args.vocab))
        ckpt = load_checkpoint(run.input(args.checkpoint))
        max_len = min(args.max_len, ckpt.config.max_len)
        seqs = _encode_all(test, vocab, max_len)
        if scorer == "mask_predict":
            dcfg = DetectorConfig(args.detect_g, args.top_s, args.repeats, run.seed)
            scores = _parallel_map(lambda s: mask_predict_score(ckpt, s, vocab, dcfg), seqs,
                                   args.workers)
        elif scorer == "causal_nll":
            scores = _parallel_map(lambda s: causal_nll_score(ckpt, s), seqs, args.workers)
        else:
            if not args.train_traces:
                raise UsageError("score --scorer kde requires --train-traces")
            train_seqs = _encode_all(read_traces(run.input(args.train_traces)), vocab, max_len)
            mode = EmbedMode(args.embed)
            train_e = np.stack(_parallel_map(lambda s: embed(ckpt, s, mode), train_seqs, args.workers))
            test_e = np.stack(_parallel_map(lambda s: embed(ckpt, s, mode), seqs, args.workers))
            if args.simsiam_epochs > 0:
                heads = simsiam_refine(train_e, epochs=args.simsiam_epochs, seed=run.seed)
                train_e, test_e = heads.project(train_e), heads.project(test_e)
            gamma = args.gamma if args.gamma is not None else 1.0 / train_e.shape[1]
            scores = [kde_score(train_e, q, gamma, s.source_tx_id) for q, s in zip(test_e, seqs)]
    write_scores(run.output(args.out), scores)
    return {"scorer": scorer, "n_scored": len(scores)}


def cmd_eval(args, run: Run) -> dict:
    if args.counts is not None:
        n_benign, n_malicious, k, tp = args.counts
        e = metrics_from_counts(n_benign, n_malicious, k, tp)
        rep = DetectionReport("counts", [e], n_benign, n_malicious, None)
    else:
        if not (args.scores and args.traces):
            raise UsageError("eval requires --scores and --traces (or --counts)")
        scores = read_scores(run.input(args.scores))
        labels = _labels(read_traces(run.input(args.traces)))
        missing = [s.tx_id for s in scores if s.tx_id not in labels]
        if missing:
            raise DataError(f"{len(missing)} scored transactions have no label, e.g. {missing[0]}")
        rep = report(scores, labels, args.k)
    if args.out:
        rep.save(run.output(args.out))
    sys.stdout.write(render_table([rep]))
    return {"scorer": rep.scorer, "k": [e.k for e in rep.entries]}


def cmd_inspect(args, run: Run) -> dict:
    vocab = Vocabulary.load(run.input(args.vocab))
    txs = {t.tx_id: t for t in read_traces(run.input(args.traces))}
    tx = txs.get(args.tx_id)
    if tx is None:
        raise DataError(f"transaction {args.tx_id} not found")
    seq = encode(flatten(tx), vocab, args.max_len, tx.tx_id)
    out = sys.stdout
    out.write(f"{tx.tx_id}  label={tx.label.value}  tokens={seq.n_tokens}\n")
    out.write(" ".join(vocab.token(i) for i in seq.ids) + "\n")
    out.write(" ".join(lx.text for lx in decode(seq.ids, vocab)) + "\n")
    return {"tx_id": args.tx_id}


def cmd_demo(args, run: Run) -> dict:
    """synth -> build-tokenizer -> train -> score -> eval at toy scale."""
    base = ["--run-dir", str(run.root), "--seed", str(args.seed), "--workers", str(args.workers)]
    steps = [
        ["synth", "--n-benign", str(args.n_benign), "--n-anomalies", str(args.n_anomalies)],
        ["build-tokenizer", "--size-cap", "300", "--top-n", "48"],
        ["train", "--epochs", str(args.epochs), "--d-model", "32", "--n-heads", "2",
         "--n-layers", "1", "--d-ff", "64", "--max-len", "128", "--lr", "2e-3",
         "--warmup-epochs", "1", "--batch-size", "16", "--grad-accum", "1"],
        ["score", "--scorer", "mask_predict", "--max-len", "128"],
        ["eval", "--k", "1", "5", "10"],
    ]
    for step in steps:
        code = run_argv(base + step)
        if code != EXIT_OK:
            raise DataError(f"demo step {step[0]} failed with exit code {code}")
    return {"steps": [s[0] for s in steps]}


# ---------------------------------------------------------------------------
# parser


_GLOBAL_DEFAULTS = {"seed": 0, "workers": 1, "config": None, "run_dir": "run", "verbose": False}


def _add_global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # accepted before and after the command; the subcommand copies only
    # write to the namespace when given, so they never clobber the former
    d = (lambda key: argparse.SUPPRESS) if suppress else _GLOBAL_DEFAULTS.get
    g = parser.add_argument_group("global")
    g.add_argument("--seed", type=int, default=d("seed"), help="global seed; stages derive their own")
    g.add_argument("--workers", type=int, default=d("workers"), help="scoring threads (results are order-stable)")
    g.add_argument("--config", default=d("config"), help="JSON file of flag defaults (CLI flags take precedence)")
    g.add_argument("--run-dir", default=d("run_dir"), help="directory for all artifacts and the manifest")
    g.add_argument("-v", "--verbose", action="store_true", default=d("verbose"))


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    _add_global_flags(common, suppress=True)

    p = _Parser(prog="blockscan", description="Trace-based transaction anomaly detection.")
    _add_global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="generate synthetic train/test traces")
    s.add_argument("--n-benign", type=int, default=700)
    s.add_argument("--n-anomalies", type=int, default=10)
    s.add_argument("--train-fraction", type=float, default=0.8)
    s.add_argument("--n-apps", type=int, default=5)
    s.add_argument("--addresses-per-app", type=int, default=8)
    s.add_argument("--templates-per-app", type=int, default=4)
    s.add_argument("--depth-max", type=int, default=3)
    s.add_argument("--train-out", default="train.jsonl")
    s.add_argument("--test-out", default="test.jsonl")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-tokenizer", parents=[common], help="count addresses, train subwords, save vocab")
    s.add_argument("--traces", default="train.jsonl")
    s.add_argument("--size-cap", type=int, default=DEFAULT_SIZE_CAP)
    s.add_argument("--top-n", type=int, default=DEFAULT_TOP_N)
    s.add_argument("--seed-alphabet-policy", choices=("chars", "hex_zero_runs"), default="hex_zero_runs")
    s.add_argument("--out", default="vocab.jsonl")
    s.set_defaults(func=cmd_build_tokenizer)

    s = sub.add_parser("train", parents=[common], help="train an encoder (mlm) or decoder (causal)")
    s.add_argument("--traces", default="train.jsonl")
    s.add_argument("--vocab", default="vocab.jsonl")
    s.add_argument("--objective", choices=("mlm", "causal"), default="mlm")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--lr", type=float, default=5e-5)
    s.add_argument("--warmup-epochs", type=int, default=10)
    s.add_argument("--batch-size", type=int, default=20)
    s.add_argument("--grad-accum", type=int, default=10)
    s.add_argument("--mask-ratio", type=float, default=0.15)
    s.add_argument("--d-model", type=int, default=64)
    s.add_argument("--n-heads", type=int, default=4)
    s.add_argument("--n-layers", type=int, default=2)
    s.add_argument("--d-ff", type=int, default=256)
    s.add_argument("--max-len", type=int, default=256)
    s.add_argument("--precision", choices=("f32", "f64"), default="f32")
    s.add_argument("--metrics", default="metrics.jsonl")
    s.add_argument("--out", default="model.ckpt")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", parents=[common], help="score a trace file with one scorer")
    s.add_argument("--scorer", choices=SCORERS, default="mask_predict")
    s.add_argument("--traces", default="test.jsonl")
    s.add_argument("--train-traces", default="train.jsonl", help="reference set for kde/gmm")
    s.add_argument("--vocab", default="vocab.jsonl")
    s.add_argument("--checkpoint", default="model.ckpt")
    s.add_argument("--max-len", type=int, default=256)
    s.add_argument("--detect-g", type=float, default=0.15)
    s.add_argument("--top-s", type=int, default=3)
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--embed", choices=("cls", "average"), default="cls")
    s.add_argument("--simsiam-epochs", type=int, default=0)
    s.add_argument("--gamma", type=float, default=None, help="KDE bandwidth (default 1/d)")
    s.add_argument("--gmm-k", type=int, default=1)
    s.add_argument("--bow-dim", type=int, default=64)
    s.add_argument("--out", default="scores.jsonl")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", parents=[common], help="turn scores + labels into a top-k report")
    s.add_argument("--scores", default="scores.jsonl")
    s.add_argument("--traces", default="test.jsonl", help="labelled trace file")
    s.add_argument("--k", type=int, nargs="+", default=list(ETHEREUM_KS))
    s.add_argument("--counts", type=int, nargs=4, metavar=("N_BENIGN", "N_MALICIOUS", "K", "TP"),
                   help="report metrics for given population counts instead of a score file")
    s.add_argument("--out", default="report.json")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", parents=[common], help="show a transaction's tokens and decoding")
    s.add_argument("tx_id")
    s.add_argument("--traces", default="test.jsonl")
    s.add_argument("--vocab", default="vocab.jsonl")
    s.add_argument("--max-len", type=int, default=1024)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("demo", parents=[common], help="run the whole pipeline at toy scale")
    s.add_argument("--n-benign", type=int, default=300)
    s.add_argument("--n-anomalies", type=int, default=6)
    s.add_argument("--epochs", type=int, default=2)
    s.set_defaults(func=cmd_demo)
    return p


_NON_CONFIG = {"func", "command", "config", "verbose"}


def _apply_config(parser: _Parser, args: argparse.Namespace, argv: Sequence[str]) -> argparse.Namespace:
    """Re-parse with config-file values as defaults so explicit flags still win."""
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a flat JSON object")
    known = set(vars(args)) - _NON_CONFIG
    keys = {k.replace("-", "_"): v for k, v in doc.items()}
    unknown = sorted(set(keys) - known)
    if unknown:
        raise UsageError(f"unknown config keys for '{args.command}': {', '.join(unknown)}")
    if any(isinstance(v, dict) for v in keys.values()):
        raise UsageError("config file must be flat")
    sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
    parser.set_defaults(**{k: v for k, v in keys.items() if k in _GLOBAL_DEFAULTS})
    sub.set_defaults(**{k: v for k, v in keys.items() if k not in _GLOBAL_DEFAULTS})
    return parser.parse_args(argv)


def _validate(args: argparse.Namespace) -> None:
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    for name in ("epochs", "n_benign", "n_anomalies"):
        if getattr(args, name, 0) < 0:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 0")


def run_argv(argv: Sequence[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(list(argv))
        if args.config:
            args = _apply_config(parser, args, list(argv))
        _validate(args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    run = Run(args.run_dir, args.command, args.seed)
    params = {k: v for k, v in sorted(vars(args).items()) if k not in _NON_CONFIG | {"run_dir"}}
    try:
        extra = args.func(args, run)
    except UsageError as exc:
        sys.stderr.write(f"blockscan {args.command}: {exc}\n")
        return EXIT_USAGE
    except (DataError, OSError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"blockscan {args.command}: data error: {exc}\n")
        return EXIT_DATA
    except (ValueError, TypeError) as exc:
        sys.stderr.write(f"blockscan {args.command}: invalid parameter: {exc}\n")
        return EXIT_USAGE
    except BlockScanError as exc:
        sys.stderr.write(f"blockscan {args.command}: {type(exc).__name__}: {exc}\n")
        return EXIT_DATA
    if args.command != "demo":
        run.record({**params, **(extra or {})})
    return EXIT_OK


def main() -> None:
    sys.exit(run_argv(sys.argv[1:]))
