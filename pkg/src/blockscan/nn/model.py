"""Pre-norm transformer encoder with rotary attention and a weight-tied MLM head."""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import NoMaskedPositions, SequenceTooLong, ShapeError
from . import functional as F


class AttentionMode(str, enum.Enum):
    BIDIRECTIONAL = "bidirectional"
    CAUSAL = "causal"


class Precision(str, enum.Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self):
        return np.float32 if self is Precision.F32 else np.float64


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_len: int = 256
    rope_base: float = 10000.0
    attention_mode: AttentionMode = AttentionMode.BIDIRECTIONAL
    precision: Precision = Precision.F32

    def __post_init__(self) -> None:
        object.__setattr__(self, "attention_mode", AttentionMode(self.attention_mode))
        object.__setattr__(self, "precision", Precision(self.precision))
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even for rotary embeddings")
        if self.max_len < 1 or self.vocab_size < 1:
            raise ValueError("max_len and vocab_size must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def causal(self) -> bool:
        return self.attention_mode is AttentionMode.CAUSAL

    @property
    def dtype(self):
        return self.precision.dtype

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention_mode"] = self.attention_mode.value
        d["precision"] = self.precision.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


Params = dict  # name -> np.ndarray

_LAYER_KEYS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w1": (d, f), p + "b1": (f,), p + "w2": (f, d), p + "b2": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "out_bias": (v,)})
    return shapes


def init_params(config: ModelConfig, seed: int = 0, std: float = 0.02) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.endswith("_b") or leaf in ("b1", "b2", "out_bias"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, std, size=shape)
            if leaf in ("wo", "w2"):
                # residual-branch outputs scaled down with depth
                arr /= math.sqrt(2 * config.n_layers)
        params[name] = arr.astype(config.dtype)
    return params


def _as_batch(ids, pad_mask):
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if pad_mask is None:
        pad_mask = np.ones(ids.shape, dtype=bool)
    else:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if single:
            pad_mask = pad_mask[None, :]
    if pad_mask.shape != ids.shape:
        raise ShapeError("pad_mask must match ids")
    return ids, pad_mask, single


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def _forward(config: ModelConfig, params: Params, ids, pad_mask, keep_cache: bool, attn_block: int | None = None):
    ids, pad_mask, single = _as_batch(ids, pad_mask)
    _, t = ids.shape
    if t > config.max_len:
        raise SequenceTooLong(f"sequence of {t} tokens exceeds max_len {config.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ShapeError("token id outside the vocabulary")
    dtype = config.dtype
    cos, sin = F.rope_angles(np.arange(t), config.head_dim, config.rope_base, dtype)
    visible = F.attention_mask(t, t, config.causal, pad_mask)[:, None, :, :]
    scale = 1.0 / math.sqrt(config.head_dim)

    x = params["embed"][ids]
    caches = []
    for i in range(config.n_layers):
        p = f"layers.{i}."
        h1, ln1 = F.layer_norm(x, params[p + "ln1_g"], params[p + "ln1_b"])
        q = _split_heads(h1 @ params[p + "wq"], config.n_heads)
        k = _split_heads(h1 @ params[p + "wk"], config.n_heads)
        v = _split_heads(h1 @ params[p + "wv"], config.n_heads)
        qr, kr = F._rotate(q, cos, sin), F._rotate(k, cos, sin)
        if attn_block is not None and not keep_cache:
            o = F.attention_tiled(qr, kr, v, config.causal, pad_mask[:, None, :], attn_block)
            probs = None
        else:
            scores = np.where(visible, (qr @ np.swapaxes(kr, -1, -2)) * scale, -np.inf)
            probs = F.softmax(scores, axis=-1)
            o = probs @ v
        o = _merge_heads(o)
        x2 = x + o @ params[p + "wo"]
        h2, ln2 = F.layer_norm(x2, params[p + "ln2_g"], params[p + "ln2_b"])
        u = h2 @ params[p + "w1"] + params[p + "b1"]
        a = F.gelu(u)
        x3 = x2 + a @ params[p + "w2"] + params[p + "b2"]
        if keep_cache:
            caches.append((h1, ln1, qr, kr, v, probs, o, h2, ln2, u, a))
        x = x3
    hidden, lnf = F.layer_norm(x, params["lnf_g"], params["lnf_b"])
    logits = hidden @ params["embed"].T + params["out_bias"]
    cache = (ids, cos, sin, caches, hidden, lnf) if keep_cache else None
    return hidden, logits, single, cache


def encoder_forward(config: ModelConfig, params: Params, ids, pad_mask=None, attn_block: int | None = None):
    """Return ``(hidden, logits)`` for one sequence ``[T]`` or a batch ``[B, T]``.

    ``pad_mask`` is True on real tokens. ``attn_block`` switches attention to
    the tiled kernel.
    """
    hidden, logits, single, _ = _forward(config, params, ids, pad_mask, False, attn_block)
    if single:
        return hidden[0], logits[0]
    return hidden, logits


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum_{b,t} a[b,t,:] outer b[b,t,:]`` as one 2-D matmul."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _loss_terms(logits, target_ids, loss_mask):
    loss_mask = np.asarray(loss_mask, dtype=bool)
    n = int(loss_mask.sum())
    if n == 0:
        raise NoMaskedPositions("no positions contribute to the loss")
    logp = F.log_softmax(logits[loss_mask].astype(np.float64), axis=-1)
    tgt = np.asarray(target_ids)[loss_mask]
    nll = -logp[np.arange(n), tgt]
    return nll, logp, n


def mlm_loss(logits, target_ids, masked_positions) -> float:
    """Mean cross-entropy over masked positions.

    ``masked_positions`` is either a boolean mask shaped like ``target_ids``
    or a sequence of integer positions into a single sequence.
    """
    logits = np.asarray(logits)
    target_ids = np.asarray(target_ids)
    mask = np.asarray(masked_positions)
    if mask.dtype != bool:
        positions = mask.astype(np.int64).ravel()
        mask = np.zeros(target_ids.shape, dtype=bool)
        mask[positions] = True
    nll, _, _ = _loss_terms(logits, target_ids, mask)
    return float(nll.mean())


def loss_and_grads(config: ModelConfig, params: Params, ids, targets, loss_mask, pad_mask=None):
    """Mean masked cross-entropy and its exact gradient for every parameter."""
    ids_b, pad_b, single = _as_batch(ids, pad_mask)
    targets = np.asarray(targets, dtype=np.int64)
    loss_mask = np.asarray(loss_mask)
    if loss_mask.dtype != bool:
        positions = loss_mask.astype(np.int64).ravel()
        loss_mask = np.zeros(targets.shape, dtype=bool)
        loss_mask[positions] = True
    if single:
        targets, loss_mask = targets[None, :], loss_mask[None, :]
    hidden, logits, _, cache = _forward(config, params, ids_b, pad_b, True)
    nll, logp, n = _loss_terms(logits, targets, loss_mask)
    loss = float(nll.mean())

    ids_b, cos, sin, caches, hidden, lnf = cache
    dtype = config.dtype
    grads = {name: np.zeros_like(p) for name, p in params.items()}

    dlogits = np.zeros(logits.shape, dtype=dtype)
    dl = np.exp(logp)
    dl[np.arange(n), targets[loss_mask]] -= 1.0
    dlogits[loss_mask] = (dl / n).astype(dtype)

    grads["out_bias"] = dlogits.sum(axis=(0, 1))
    grads["embed"] += _outer_sum(dlogits, hidden)
    dhidden = dlogits @ params["embed"]
    dx, grads["lnf_g"], grads["lnf_b"] = F.layer_norm_backward(dhidden, params["lnf_g"], lnf)

    scale = 1.0 / math.sqrt(config.head_dim)
    for i in reversed(range(config.n_layers)):
        p = f"layers.{i}."
        h1, ln1, qr, kr, v, probs, o, h2, ln2, u, a = caches[i]
        # feed-forward branch
        grads[p + "b2"] = dx.sum(axis=(0, 1))
        grads[p + "w2"] = _outer_sum(a, dx)
        du = F.gelu_backward(dx @ params[p + "w2"].T, u)
        grads[p + "b1"] = du.sum(axis=(0, 1))
        grads[p + "w1"] = _outer_sum(h2, du)
        dh2 = du @ params[p + "w1"].T
        d_ln2, grads[p + "ln2_g"], grads[p + "ln2_b"] = F.layer_norm_backward(dh2, params[p + "ln2_g"], ln2)
        dx2 = dx + d_ln2
        # attention branch
        grads[p + "wo"] = _outer_sum(o, dx2)
        do = _split_heads(dx2 @ params[p + "wo"].T, config.n_heads)
        dprobs = do @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(probs, -1, -2) @ do
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
        dqr = dscores @ kr
        dkr = np.swapaxes(dscores, -1, -2) @ qr
        dq = _merge_heads(F.rope_backward(dqr, cos, sin))
        dk = _merge_heads(F.rope_backward(dkr, cos, sin))
        dv = _merge_heads(dv)
        grads[p + "wq"] = _outer_sum(h1, dq)
        grads[p + "wk"] = _outer_sum(h1, dk)
        grads[p + "wv"] = _outer_sum(h1, dv)
        dh1 = dq @ params[p + "wq"].T + dk @ params[p + "wk"].T + dv @ params[p + "wv"].T
        d_ln1, grads[p + "ln1_g"], grads[p + "ln1_b"] = F.layer_norm_backward(dh1, params[p + "ln1_g"], ln1)
        dx = dx2 + d_ln1
    np.add.at(grads["embed"], ids_b.ravel(), dx.reshape(-1, config.d_model))
    return loss, {k: g.astype(dtype, copy=False) for k, g in grads.items()}


def backward(config: ModelConfig, params: Params, ids, targets, masked_positions, pad_mask=None) -> Params:
    """Gradients of :func:`mlm_loss` with respect to every parameter tensor."""
    return loss_and_grads(config, params, ids, targets, masked_positions, pad_mask)[1]
