"""Token masking, the MLM (or causal LM) training loop, and checkpoint lifecycle."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceError, EmptyCorpus, NoEligiblePositions, PositionOutOfRange
from .nn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint  # noqa: F401
from .nn.model import ModelConfig, init_params, loss_and_grads
from .nn.optim import BETA1, BETA2, EPS, AdamState, adam_step, lr_at
from .tokenizer import EncodedSequence, Vocabulary

log = logging.getLogger(__name__)

MASK_RATIO = 0.15


@dataclass(frozen=True)
class MaskingPlan:
    positions: tuple[int, ...]
    seed: int
    policy: str = "replace_with_mask"


@dataclass
class TrainHyper:
    base_lr: float = 5e-5
    warmup_epochs: int = 10
    total_epochs: int = 100
    batch_size: int = 20
    grad_accum: int = 10
    mask_ratio: float = MASK_RATIO
    seed: int = 0
    max_len: int = 1024
    weight_decay: float = 0.0
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie strictly between 0 and 1")
        if self.total_epochs < 0 or self.warmup_epochs < 0 or self.total_epochs < self.warmup_epochs:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("batch_size and grad_accum must be >= 1")


def eligible_positions(ids: Sequence[int], vocab: Vocabulary) -> list[int]:
    """Positions that may be masked: not padding and not the leading [CLS]."""
    start = 1 if ids and ids[0] == vocab.cls_id else 0
    return [i for i in range(start, len(ids)) if ids[i] != vocab.pad_id]


def mask_count(g: float, n_eligible: int) -> int:
    # tolerance absorbs float fuzz such as 0.15 * 100 = 15.000000000000002
    return max(1, math.ceil(g * n_eligible - 1e-9))


def make_masking_plan(seq: EncodedSequence, g: float, seed, vocab: Vocabulary) -> MaskingPlan:
    """Sample ``ceil(g * n_eligible)`` (at least one) distinct positions."""
    eligible = eligible_positions(seq.ids, vocab)
    if not eligible:
        raise NoEligiblePositions(f"sequence {seq.source_tx_id!r} has nothing to mask")
    rng = np.random.default_rng(seed)
    n = min(len(eligible), mask_count(g, len(eligible)))
    chosen = rng.choice(len(eligible), size=n, replace=False)
    return MaskingPlan(tuple(sorted(eligible[i] for i in chosen)), _seed_repr(seed))


def _seed_repr(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return int(np.random.SeedSequence(seed).generate_state(1, np.uint64)[0])


def apply_mask(seq: EncodedSequence, plan: MaskingPlan, vocab: Vocabulary) -> tuple[list[int], dict[int, int]]:
    """Replace planned positions with [MASK]; return masked ids and {pos: original}."""
    ids = list(seq.ids)
    targets = {}
    for pos in plan.positions:
        if not 0 <= pos < len(ids):
            raise PositionOutOfRange(f"position {pos} outside sequence of length {len(ids)}")
        targets[pos] = ids[pos]
        ids[pos] = vocab.mask_id
    return ids, targets


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    valid = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        valid[i, : len(s)] = True
    return ids, valid


def mlm_batch(seqs: Sequence[EncodedSequence], vocab: Vocabulary, g: float, seeds):
    """Masked inputs, targets and loss mask for one micro-batch."""
    masked, targets, loss_pos = [], [], []
    for seq, seed in zip(seqs, seeds):
        plan = make_masking_plan(seq, g, seed, vocab)
        m, _ = apply_mask(seq, plan, vocab)
        masked.append(m)
        targets.append(seq.ids)
        loss_pos.append(plan.positions)
    ids, valid = pad_batch(masked, vocab.pad_id)
    tgt, _ = pad_batch(targets, vocab.pad_id)
    loss_mask = np.zeros_like(valid)
    for i, pos in enumerate(loss_pos):
        loss_mask[i, list(pos)] = True
    return ids, tgt, loss_mask, valid


def causal_batch(seqs: Sequence[EncodedSequence], vocab: Vocabulary):
    """Next-token targets: position ``i`` predicts token ``i + 1``."""
    ids, valid = pad_batch([s.ids for s in seqs], vocab.pad_id)
    tgt = np.full_like(ids, vocab.pad_id)
    tgt[:, :-1] = ids[:, 1:]
    loss_mask = np.zeros_like(valid)
    loss_mask[:, :-1] = valid[:, 1:]
    return ids, tgt, loss_mask, valid


def train(
    config: ModelConfig,
    vocab: Vocabulary,
    corpus: Sequence[EncodedSequence],
    hyper: TrainHyper,
    metrics_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Train from scratch; the objective follows ``config.attention_mode``.

    Bidirectional configs train masked-token reconstruction; causal configs
    train next-token prediction. Returns the final checkpoint, whose ``meta``
    holds the per-epoch loss trace.
    """
    if not corpus:
        raise EmptyCorpus("training corpus is empty")
    if len(vocab) > config.vocab_size:
        raise ValueError("vocabulary is larger than the model's vocab_size")
    params = init_params(config, hyper.seed, hyper.init_std)
    state = AdamState.zeros_like(params)
    trace: list[dict] = []
    ckpt = Checkpoint(config, params, {"objective": _objective(config), "epochs": 0, "loss_trace": []})
    if hyper.total_epochs == 0:
        if metrics_path:
            Path(metrics_path).write_text("")
        return ckpt

    n = len(corpus)
    micro_per_epoch = math.ceil(n / hyper.batch_size)
    steps_per_epoch = math.ceil(micro_per_epoch / hyper.grad_accum)
    total_steps = steps_per_epoch * hyper.total_epochs
    warmup_steps = min(steps_per_epoch * hyper.warmup_epochs, total_steps - 1)
    metrics_fh = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    step = 0
    try:
        for epoch in range(hyper.total_epochs):
            t0 = time.perf_counter()
            order = np.random.default_rng(hyper.seed ^ epoch).permutation(n)
            loss_sum, weight_sum, lr = 0.0, 0, 0.0
            acc: dict | None = None
            n_acc = 0
            for mb in range(micro_per_epoch):
                idx = order[mb * hyper.batch_size:(mb + 1) * hyper.batch_size]
                batch = [corpus[i] for i in idx]
                if config.causal:
                    ids, tgt, loss_mask, valid = causal_batch(batch, vocab)
                else:
                    seeds = [(hyper.seed, epoch, int(i)) for i in idx]
                    ids, tgt, loss_mask, valid = mlm_batch(batch, vocab, hyper.mask_ratio, seeds)
                loss, grads = loss_and_grads(config, params, ids, tgt, loss_mask, valid)
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                w = int(loss_mask.sum())
                loss_sum += loss * w
                weight_sum += w
                if acc is None:
                    acc = grads
                else:
                    for k in acc:
                        acc[k] += grads[k]
                n_acc += 1
                if n_acc == hyper.grad_accum or mb == micro_per_epoch - 1:
                    for k in acc:
                        acc[k] /= n_acc
                    step += 1
                    lr = lr_at(step, warmup_steps, total_steps, hyper.base_lr)
                    adam_step(params, acc, state, lr, BETA1, BETA2, EPS, hyper.weight_decay)
                    acc, n_acc = None, 0
            record = {
                "epoch": epoch + 1,
                "mean_masked_ce": loss_sum / weight_sum,
                "lr": lr,
                "wall_time_s": round(time.perf_counter() - t0, 3),
            }
            trace.append(record)
            log.info("epoch %d  ce %.4f  lr %.2e", record["epoch"], record["mean_masked_ce"], lr)
            if metrics_fh:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if on_epoch:
                on_epoch(record)
            meta = {
                "objective": _objective(config),
                "epochs": epoch + 1,
                "loss_trace": [r["mean_masked_ce"] for r in trace],
                "hyper": asdict(hyper),
            }
            ckpt = Checkpoint(config, params, meta)
            if checkpoint_dir is not None:
                save_checkpoint(ckpt, Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}.ckpt")
    finally:
        if metrics_fh:
            metrics_fh.close()
    return ckpt


def _objective(config: ModelConfig) -> str:
    return "causal" if config.causal else "mlm"
