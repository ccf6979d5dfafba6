"""Top-k ranking evaluation: FPR, recall and precision per threshold, plus AUC."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .detect import AnomalyScore
from .errors import DataError, DuplicateTxId
from .trace import Label

ETHEREUM_KS = (5, 10, 15)
SOLANA_KS = (10, 15, 20)


def _is_malicious(label) -> bool:
    if isinstance(label, (bool, np.bool_)):
        return bool(label)
    label = Label(label)
    if label is Label.UNKNOWN:
        raise DataError("evaluation needs benign/malicious labels, got 'unknown'")
    return label is Label.MALICIOUS


def ranking(scores: Sequence[AnomalyScore]) -> list[AnomalyScore]:
    """Scores sorted descending, ties by ascending tx_id."""
    seen = set()
    for s in scores:
        if s.tx_id in seen:
            raise DuplicateTxId(f"duplicate tx_id {s.tx_id}")
        seen.add(s.tx_id)
    return sorted(scores, key=lambda s: (-s.score, s.tx_id))


def rank_and_label(scores: Sequence[AnomalyScore], k: int) -> dict[str, bool]:
    """Map tx_id -> True for the ``k`` highest-scoring transactions."""
    if k < 0:
        raise ValueError("k must be >= 0")
    ranked = ranking(scores)
    return {s.tx_id: i < k for i, s in enumerate(ranked)}


@dataclass
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int
    fpr: float
    recall: float | None
    precision: float
    precision_defined: bool


def confusion_metrics(predictions: Mapping[str, bool], labels: Mapping[str, object]) -> Confusion:
    """Confusion counts and rates. Recall is ``None`` when there are no positives;
    precision is 0 (flagged undefined) when nothing was predicted anomalous."""
    tp = fp = fn = tn = 0
    for tx_id, predicted in predictions.items():
        if tx_id not in labels:
            raise DataError(f"no ground-truth label for {tx_id}")
        actual = _is_malicious(labels[tx_id])
        if predicted and actual:
            tp += 1
        elif predicted:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    recall = tp / (tp + fn) if tp + fn else None
    precision_defined = tp + fp > 0
    precision = tp / (tp + fp) if precision_defined else 0.0
    fpr = fp / (fp + tn) if fp + tn else 0.0
    return Confusion(tp, fp, fn, tn, fpr, recall, precision, precision_defined)


def auc(scores: Sequence[AnomalyScore], labels: Mapping[str, object]) -> float | None:
    """Probability that a random malicious transaction outscores a random benign one
    (ties count one half)."""
    pos = np.array([s.score for s in scores if _is_malicious(labels[s.tx_id])])
    neg = np.array([s.score for s in scores if not _is_malicious(labels[s.tx_id])])
    if len(pos) == 0 or len(neg) == 0:
        return None
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(len(allv))
    sorted_v = allv[order]
    i = 0
    while i < len(sorted_v):
        j = i
        while j + 1 < len(sorted_v) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


@dataclass
class KEntry:
    k: int
    fpr: float
    recall: float | None
    precision: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision_defined: bool = True


@dataclass
class DetectionReport:
    scorer: str
    entries: list[KEntry]
    n_benign: int
    n_malicious: int
    auc: float | None = None
    extensions: list[str] = field(default_factory=lambda: ["auc"])

    def entry(self, k: int) -> KEntry:
        for e in self.entries:
            if e.k == k:
                return e
        raise KeyError(k)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionReport":
        d = dict(d)
        d["entries"] = [KEntry(**e) for e in d["entries"]]
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DetectionReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def report(scores: Sequence[AnomalyScore], labels: Mapping[str, object], k_list: Sequence[int],
           scorer: str | None = None) -> DetectionReport:
    if not k_list:
        raise ValueError("k_list must not be empty")
    ranked = ranking(scores)
    entries = []
    for k in k_list:
        preds = {s.tx_id: i < k for i, s in enumerate(ranked)}
        c = confusion_metrics(preds, labels)
        entries.append(KEntry(k, c.fpr, c.recall, c.precision, c.tp, c.fp, c.fn, c.tn, c.precision_defined))
    n_mal = sum(_is_malicious(labels[s.tx_id]) for s in scores)
    name = scorer or (scores[0].scorer.value if scores else "unknown")
    return DetectionReport(name, entries, len(scores) - n_mal, n_mal, auc(scores, labels))


def metrics_from_counts(n_benign: int, n_malicious: int, k: int, tp: int) -> KEntry:
    """Top-k metrics for a population where ``tp`` of the top ``k`` are malicious."""
    if not 0 <= tp <= min(k, n_malicious) or k - tp > n_benign:
        raise ValueError("inconsistent counts")
    fp = k - tp
    fn = n_malicious - tp
    tn = n_benign - fp
    return KEntry(
        k=k,
        fpr=fp / n_benign if n_benign else 0.0,
        recall=tp / n_malicious if n_malicious else None,
        precision=tp / k if k else 0.0,
        tp=tp, fp=fp, fn=fn, tn=tn,
        precision_defined=k > 0,
    )


def fmt_pct(x: float | None) -> str:
    if x is None:
        return "n/a"
    s = f"{100.0 * x:.2f}".rstrip("0").rstrip(".")
    return f"{s}%"


def render_table(reports: Sequence[DetectionReport]) -> str:
    """Plain-text table: one row per scorer, FPR/Recall/Precision per k."""
    ks = [e.k for e in reports[0].entries] if reports else []
    head1 = f"{'':<18}" + "".join(f"| {'k = ' + str(k):^30}" for k in ks)
    head2 = f"{'Method':<18}" + "".join(f"| {'FPR':>9}{'Recall':>10}{'Precision':>11}" for _ in ks)
    lines = [head1, head2, "-" * len(head2)]
    for r in reports:
        row = f"{r.scorer:<18}"
        for k in ks:
            e = r.entry(k)
            row += f"| {fmt_pct(e.fpr):>9}{fmt_pct(e.recall):>10}{fmt_pct(e.precision):>11}"
        lines.append(row)
    return "\n".join(lines) + "\n"
