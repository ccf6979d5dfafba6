"""Reference detectors: sequence length, and bag-of-tokens features under a GMM."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detect import AnomalyScore, Scorer
from .errors import DegenerateData, DimensionMismatch, EmptySequence, TooFewSamples
from .tokenizer import EncodedSequence

REG_EPS = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


def length_score(seq: EncodedSequence) -> AnomalyScore:
    return AnomalyScore(seq.source_tx_id, float(seq.n_tokens), Scorer.LENGTH, {"n_tokens": seq.n_tokens})


def token_histogram(seq: EncodedSequence, vocab_size: int) -> np.ndarray:
    if seq.n_tokens == 0:
        raise EmptySequence("cannot featurize an empty sequence")
    counts = np.bincount(np.asarray(seq.ids), minlength=vocab_size).astype(np.float64)
    return counts / counts.sum()


def projection_matrix(vocab_size: int, d_out: int, seed: int) -> np.ndarray:
    """Seeded random ``+-1/sqrt(d_out)`` matrix of shape ``[vocab_size, d_out]``."""
    if d_out < 1:
        raise ValueError("d_out must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.choice([-1.0, 1.0], size=(vocab_size, d_out)) / math.sqrt(d_out)


def bow_features(seq: EncodedSequence, vocab_size: int, d_out: int = 64, seed: int = 0,
                 projection: np.ndarray | None = None) -> np.ndarray:
    """L1-normalized token histogram, randomly projected to ``d_out`` dims."""
    if projection is None:
        projection = projection_matrix(vocab_size, d_out, seed)
    return token_histogram(seq, vocab_size) @ projection


@dataclass
class GMMParams:
    weights: np.ndarray  # [K]
    means: np.ndarray  # [K, d]
    covariances: np.ndarray  # [K, d] diagonal
    reg_eps: float = REG_EPS
    log_likelihood_trace: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.weights)

    def to_record(self) -> dict:
        return {
            "K": self.K,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "reg_eps": self.reg_eps,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "GMMParams":
        return cls(np.array(rec["weights"]), np.array(rec["means"]), np.array(rec["covariances"]), rec["reg_eps"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_record(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "GMMParams":
        return cls.from_record(json.loads(Path(path).read_text()))


def _component_log_pdf(x: np.ndarray, params: GMMParams) -> np.ndarray:
    """``log w_k + log N(x; mu_k, diag var_k)`` with shape ``[n, K]``."""
    var = params.covariances
    diff = x[:, None, :] - params.means[None, :, :]
    quad = (diff * diff / var[None]).sum(axis=-1)
    logdet = np.log(var).sum(axis=-1)
    d = x.shape[1]
    return np.log(params.weights)[None, :] - 0.5 * (d * _LOG_2PI + logdet[None, :] + quad)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _kmeans_pp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[int(rng.integers(0, len(x)))]]
    for _ in range(1, K):
        d2 = np.min([((x - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        idx = int(rng.integers(0, len(x))) if total == 0 else int(rng.choice(len(x), p=d2 / total))
        centers.append(x[idx])
    return np.array(centers)


def fit_gmm(features, K: int = 1, seed: int = 0, max_iters: int = 200, tol: float = 1e-6,
            reg_eps: float = REG_EPS) -> GMMParams:
    """Diagonal-covariance Gaussian mixture.

    ``K == 1`` is the closed-form sample mean and (biased) variance; ``K > 1``
    runs EM from a seeded k-means++ start.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if K < 1 or n < K:
        raise TooFewSamples(f"need at least K={K} samples, got {n}")
    if np.all(x.var(axis=0) == 0) and reg_eps <= 0:
        raise DegenerateData("every feature dimension has zero variance")
    if K == 1:
        mean = x.mean(axis=0)
        var = np.maximum(x.var(axis=0), reg_eps)
        if not np.all(var > 0):
            raise DegenerateData("zero variance after flooring")
        p = GMMParams(np.ones(1), mean[None, :], var[None, :], reg_eps)
        p.log_likelihood_trace = [float(_logsumexp(_component_log_pdf(x, p), 1).sum())]
        return p

    rng = np.random.default_rng(seed)
    means = _kmeans_pp(x, K, rng)
    var0 = np.maximum(x.var(axis=0), reg_eps)
    p = GMMParams(np.full(K, 1.0 / K), means, np.tile(var0, (K, 1)), reg_eps)
    trace: list[float] = []
    prev = -np.inf
    for _ in range(max_iters):
        logp = _component_log_pdf(x, p)
        ll_rows = _logsumexp(logp, 1)
        ll = float(ll_rows.sum())
        trace.append(ll)
        if ll - prev < tol:
            break
        prev = ll
        resp = np.exp(logp - ll_rows[:, None])
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        var = (resp.T @ (x * x)) / nk[:, None] - means * means
        var = np.maximum(var, reg_eps)
        p = GMMParams(weights / weights.sum(), means, var, reg_eps)
    p.log_likelihood_trace = trace
    return p


def gmm_log_density(params: GMMParams, x) -> np.ndarray:
    """Log-density of each row of ``x`` (``[n, d]``)."""
    arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if arr.shape[1] != params.means.shape[1]:
        raise DimensionMismatch(f"feature width {arr.shape[1]} != model width {params.means.shape[1]}")
    return _logsumexp(_component_log_pdf(arr, params), 1)


def gmm_score(params: GMMParams, x, tx_id: str = "") -> AnomalyScore:
    """Negative log-likelihood of one feature vector."""
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if arr.shape[-1] != params.means.shape[1]:
        raise DimensionMismatch(f"feature width {arr.shape[-1]} != model width {params.means.shape[1]}")
    ll = float(_logsumexp(_component_log_pdf(arr[None, :], params), 1)[0])
    return AnomalyScore(tx_id, -ll, Scorer.GMM, {"K": params.K})
