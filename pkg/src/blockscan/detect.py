"""Anomaly scorers over a trained encoder.

Every scorer reports "higher = more anomalous": densities and
log-likelihoods are negated before they become scores.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptySequence,
    EmptyTrainSet,
    InvalidGamma,
    SequenceTooLong,
    TooFewEmbeddings,
    WrongAttentionMode,
)
from .nn.checkpoint import Checkpoint
from .nn.functional import log_softmax
from .nn.model import encoder_forward
from .nn.optim import AdamState, adam_step
from .tokenizer import EncodedSequence, Vocabulary
from .train import apply_mask, make_masking_plan


class Scorer(str, enum.Enum):
    MASK_PREDICT = "mask_predict"
    CAUSAL_NLL = "causal_nll"
    KDE = "kde"
    GMM = "gmm"
    LENGTH = "length_heuristic"


@dataclass(frozen=True)
class AnomalyScore:
    tx_id: str
    score: float
    scorer: Scorer
    detail: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "tx_id": self.tx_id,
            "scorer": self.scorer.value,
            "score": self.score,
            "n_masked": self.detail.get("n_masked"),
            "n_missed": self.detail.get("n_missed"),
            "repeats": self.detail.get("repeats"),
        }


@dataclass(frozen=True)
class DetectorConfig:
    detect_g: float = 0.15
    top_s: int = 3
    repeats: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.top_s < 1 or self.repeats < 1:
            raise ValueError("top_s and repeats must be >= 1")
        if not 0.0 < self.detect_g < 1.0:
            raise ValueError("detect_g must lie strictly between 0 and 1")


def tx_seed(tx_id: str) -> int:
    """Stable 64-bit integer derived from a transaction hash."""
    return int.from_bytes(hashlib.sha256(tx_id.encode("utf-8")).digest()[:8], "little")


def _check_len(ckpt: Checkpoint, seq: EncodedSequence) -> None:
    if seq.n_tokens > ckpt.config.max_len:
        raise SequenceTooLong(f"{seq.n_tokens} tokens exceed max_len {ckpt.config.max_len}")


def top_candidates(logits: np.ndarray, s: int) -> np.ndarray:
    """Indices of the ``s`` largest logits per row, ties by ascending id."""
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., :s]


def mask_predict_score(ckpt: Checkpoint, seq: EncodedSequence, vocab: Vocabulary, cfg: DetectorConfig) -> AnomalyScore:
    """Failed-prediction ratio of masked tokens against top-s candidate sets."""
    _check_len(ckpt, seq)
    base = tx_seed(seq.source_tx_id)
    plans, batch = [], []
    for r in range(cfg.repeats):
        plan = make_masking_plan(seq, cfg.detect_g, [cfg.seed, base, r], vocab)
        masked, _ = apply_mask(seq, plan, vocab)
        plans.append(plan)
        batch.append(masked)
    _, logits = encoder_forward(ckpt.config, ckpt.params, np.array(batch))
    truth = np.asarray(seq.ids)
    ratios, n_masked, n_missed = [], 0, 0
    for r, plan in enumerate(plans):
        pos = np.array(plan.positions)
        cands = top_candidates(logits[r, pos], cfg.top_s)
        missed = int((cands != truth[pos, None]).all(axis=1).sum())
        ratios.append(missed / len(pos))
        n_masked += len(pos)
        n_missed += missed
    return AnomalyScore(
        seq.source_tx_id,
        float(np.mean(ratios)),
        Scorer.MASK_PREDICT,
        {"n_masked": n_masked, "n_missed": n_missed, "repeats": cfg.repeats, "top_s": cfg.top_s},
    )


def masked_cross_entropy(ckpt: Checkpoint, seq: EncodedSequence, vocab: Vocabulary, cfg: DetectorConfig) -> float:
    """Mean cross-entropy at masked positions under the detection masking plans."""
    _check_len(ckpt, seq)
    base = tx_seed(seq.source_tx_id)
    total, count = 0.0, 0
    for r in range(cfg.repeats):
        plan = make_masking_plan(seq, cfg.detect_g, [cfg.seed, base, r], vocab)
        masked, _ = apply_mask(seq, plan, vocab)
        _, logits = encoder_forward(ckpt.config, ckpt.params, np.array(masked))
        pos = np.array(plan.positions)
        logp = log_softmax(logits[pos].astype(np.float64))
        total += float(-logp[np.arange(len(pos)), np.asarray(seq.ids)[pos]].sum())
        count += len(pos)
    return total / count


def token_nlls(ckpt: Checkpoint, seq: EncodedSequence) -> np.ndarray:
    """``-log p(t_i | t_<i)`` for ``i = 1 .. n-1`` under a causal model."""
    if not ckpt.config.causal:
        raise WrongAttentionMode("causal NLL needs a model trained with causal attention")
    _check_len(ckpt, seq)
    ids = np.asarray(seq.ids)
    if len(ids) < 2:
        return np.zeros(0)
    _, logits = encoder_forward(ckpt.config, ckpt.params, ids)
    logp = log_softmax(logits[:-1].astype(np.float64))
    return -logp[np.arange(len(ids) - 1), ids[1:]]


def causal_nll_score(ckpt: Checkpoint, seq: EncodedSequence) -> AnomalyScore:
    nll = token_nlls(ckpt, seq)
    return AnomalyScore(seq.source_tx_id, float(nll.sum()), Scorer.CAUSAL_NLL, {"n_tokens": int(len(nll))})


class EmbedMode(str, enum.Enum):
    CLS = "cls"
    AVERAGE = "average"


def embed(ckpt: Checkpoint, seq: EncodedSequence, mode: EmbedMode | str = EmbedMode.CLS) -> np.ndarray:
    """Final hidden state at position 0, or the mean over all positions."""
    if seq.n_tokens == 0:
        raise EmptySequence("cannot embed an empty sequence")
    _check_len(ckpt, seq)
    hidden, _ = encoder_forward(ckpt.config, ckpt.params, np.asarray(seq.ids))
    if EmbedMode(mode) is EmbedMode.CLS:
        return hidden[0].astype(np.float64)
    return hidden.mean(axis=0).astype(np.float64)


# ---------------------------------------------------------------------------
# SimSiam refinement


def _neg_cos(p: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``-cos(p, z)`` and its gradient with respect to ``p``."""
    pn = np.linalg.norm(p, axis=1, keepdims=True) + 1e-12
    zn = np.linalg.norm(z, axis=1, keepdims=True) + 1e-12
    cos = (p * z).sum(axis=1, keepdims=True) / (pn * zn)
    grad = -(z / (pn * zn) - cos * p / (pn * pn))
    return -cos[:, 0], grad


@dataclass
class SimSiamHeads:
    """Affine projection ``f`` and prediction ``h`` heads."""

    wf: np.ndarray
    bf: np.ndarray
    wh: np.ndarray
    bh: np.ndarray

    def project(self, e: np.ndarray) -> np.ndarray:
        return np.asarray(e) @ self.wf + self.bf

    def predict(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.wh + self.bh

    @classmethod
    def identity(cls, d: int) -> "SimSiamHeads":
        return cls(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d))

    def pair_loss(self, ei: np.ndarray, ej: np.ndarray) -> np.ndarray:
        """Symmetric SimSiam loss per pair (rows of ``ei`` and ``ej``)."""
        zi, zj = self.project(np.atleast_2d(ei)), self.project(np.atleast_2d(ej))
        a, _ = _neg_cos(self.predict(zi), zj)
        b, _ = _neg_cos(self.predict(zj), zi)
        return 0.5 * (a + b)

    def loss_and_grads(self, ei: np.ndarray, ej: np.ndarray) -> tuple[float, dict]:
        n = len(ei)
        grads = {k: np.zeros_like(v) for k, v in self.params().items()}
        total = 0.0
        for src, tgt in ((ei, ej), (ej, ei)):
            z_src = self.project(src)
            target = self.project(tgt)  # stop-gradient branch
            p = self.predict(z_src)
            loss, dp = _neg_cos(p, target)
            total += loss.sum()
            dp = dp * (0.5 / n)
            grads["wh"] += z_src.T @ dp
            grads["bh"] += dp.sum(axis=0)
            dz = dp @ self.wh.T
            grads["wf"] += src.T @ dz
            grads["bf"] += dz.sum(axis=0)
        return 0.5 * total / n, grads

    def params(self) -> dict:
        return {"wf": self.wf, "bf": self.bf, "wh": self.wh, "bh": self.bh}


def simsiam_refine(
    embeddings: Sequence[np.ndarray],
    epochs: int = 50,
    lr: float = 1e-3,
    seed: int = 0,
    width: int | None = None,
) -> SimSiamHeads:
    """Train projection/prediction heads on randomly paired benign embeddings.

    Each epoch pairs embedding ``i`` with embedding ``perm[i]``.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or len(e) < 2:
        raise TooFewEmbeddings("SimSiam needs at least two embeddings")
    d = e.shape[1]
    width = width or d
    rng = np.random.default_rng(seed)
    eye = np.eye(d, width)
    heads = SimSiamHeads(
        eye + rng.normal(0.0, 0.01, (d, width)), np.zeros(width),
        np.eye(width) + rng.normal(0.0, 0.01, (width, width)), np.zeros(width),
    )
    params = heads.params()
    state = AdamState.zeros_like(params)
    for _ in range(epochs):
        perm = rng.permutation(len(e))
        # self-pairs carry no signal; rotate them onto a neighbour
        fixed = perm == np.arange(len(e))
        perm[fixed] = (np.arange(len(e))[fixed] + 1) % len(e)
        _, grads = heads.loss_and_grads(e, e[perm])
        adam_step(params, grads, state, lr)
    return heads


# ---------------------------------------------------------------------------
# kernel density


def kde_log_density(train_embeds, query, gamma: float) -> float:
    """``(1/gamma) * log sum_i exp(-gamma * ||query - e_i||^2)`` via max-shift."""
    train = np.asarray(train_embeds, dtype=np.float64)
    if train.size == 0:
        raise EmptyTrainSet("KDE needs at least one training embedding")
    if not gamma > 0:
        raise InvalidGamma(f"gamma must be > 0, got {gamma}")
    train = np.atleast_2d(train)
    q = np.asarray(query, dtype=np.float64)
    expo = -gamma * ((train - q) ** 2).sum(axis=1)
    m = expo.max()
    return float((m + math.log(np.exp(expo - m).sum())) / gamma)


def kde_score(train_embeds, query, gamma: float, tx_id: str = "") -> AnomalyScore:
    kde = kde_log_density(train_embeds, query, gamma)
    return AnomalyScore(tx_id, -kde, Scorer.KDE, {"gamma": gamma, "log_density": kde})


# ---------------------------------------------------------------------------
# score files


def write_scores(path: str | Path, scores: Iterable[AnomalyScore]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scores:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


def read_scores(path: str | Path) -> list[AnomalyScore]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            detail = {k: rec.get(k) for k in ("n_masked", "n_missed", "repeats") if rec.get(k) is not None}
            out.append(AnomalyScore(rec["tx_id"], float(rec["score"]), Scorer(rec["scorer"]), detail))
    return out
