"""Stateless building blocks with hand-written backward passes."""
from __future__ import annotations

import math

import numpy as np

from ..errors import InvalidBlock, OddDimension, ShapeError

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd)


def layer_norm_backward(dy: np.ndarray, gain: np.ndarray, cache):
    xhat, rstd = cache
    reduce_axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=reduce_axes)
    dbias = dy.sum(axis=reduce_axes)
    dxhat = dy * gain
    n = dy.shape[-1]
    dx = rstd / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def gelu(u: np.ndarray) -> np.ndarray:
    # tanh approximation
    # u * u * u: integer ** dispatches to the much slower pow loop
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * (u * u * u))))


def gelu_backward(du_out: np.ndarray, u: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    return np.divide(e, s, out=np.zeros_like(e), where=s > 0)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# rotary position embedding


def rope_angles(positions, head_dim: int, rope_base: float = 10000.0, dtype=np.float64):
    """cos/sin tables of shape ``[len(positions), head_dim // 2]``."""
    if head_dim % 2:
        raise OddDimension(f"head_dim {head_dim} must be even")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = rope_base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    theta = np.outer(pos, inv_freq)
    return np.cos(theta).astype(dtype), np.sin(theta).astype(dtype)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_apply(vectors: np.ndarray, positions, rope_base: float = 10000.0) -> np.ndarray:
    """Rotate each dimension pair ``(2i, 2i+1)`` by ``pos * base**(-2i/d)``.

    ``vectors`` has shape ``[..., seq, head_dim]``.
    """
    head_dim = vectors.shape[-1]
    if head_dim % 2:
        raise OddDimension(f"head_dim {head_dim} must be even")
    if len(positions) != vectors.shape[-2]:
        raise ShapeError("positions must match the sequence axis")
    cos, sin = rope_angles(positions, head_dim, rope_base, vectors.dtype)
    return _rotate(vectors, cos, sin)


def rope_backward(grad: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # the transpose of a rotation is the rotation by the negated angle
    return _rotate(grad, cos, -sin)


# ---------------------------------------------------------------------------
# attention


def attention_mask(n_q: int, n_k: int, causal: bool, pad_mask=None) -> np.ndarray:
    """Boolean visibility ``[..., n_q, n_k]``; True where a query may attend."""
    visible = np.ones((n_q, n_k), dtype=bool)
    if causal:
        visible = np.tril(visible)
    if pad_mask is not None:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        visible = visible & pad_mask[..., None, :]
    return visible


def _check_qkv(q, k, v):
    if q.ndim < 2 or q.shape[:-2] != k.shape[:-2] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("query and key widths differ")


def attention_weights(q, k, causal: bool = False, pad_mask=None) -> np.ndarray:
    _check_qkv(q, k, k)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    visible = attention_mask(q.shape[-2], k.shape[-2], causal, pad_mask)
    scores = np.where(visible, scores, -np.inf)
    return softmax(scores, axis=-1)


def attention(q, k, v, causal: bool = False, pad_mask=None) -> np.ndarray:
    """Scaled dot-product attention; keys where ``pad_mask`` is False are hidden."""
    _check_qkv(q, k, v)
    return np.matmul(attention_weights(q, k, causal, pad_mask), v)


def attention_tiled(q, k, v, causal: bool = False, pad_mask=None, block: int = 64) -> np.ndarray:
    """Streaming-softmax attention over ``block``-sized query and key tiles.

    Only a ``block x block`` score tile is alive at any time. Results match
    :func:`attention` up to floating-point reassociation.
    """
    _check_qkv(q, k, v)
    if block < 1:
        raise InvalidBlock(f"block must be >= 1, got {block}")
    n_q, n_k = q.shape[-2], k.shape[-2]
    scale = 1.0 / math.sqrt(q.shape[-1])
    batch = q.shape[:-2]
    keep = None if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    out = np.zeros(batch + (n_q, v.shape[-1]), dtype=np.result_type(q, v))
    for qs in range(0, n_q, block):
        qe = min(qs + block, n_q)
        qb = q[..., qs:qe, :]
        m = np.full(batch + (qe - qs, 1), -np.inf, dtype=out.dtype)
        l = np.zeros_like(m)
        acc = np.zeros(batch + (qe - qs, v.shape[-1]), dtype=out.dtype)
        for ks in range(0, n_k, block):
            ke = min(ks + block, n_k)
            if causal and ks > qe - 1:
                break
            s = np.matmul(qb, np.swapaxes(k[..., ks:ke, :], -1, -2)) * scale
            vis = np.ones((qe - qs, ke - ks), dtype=bool)
            if causal:
                vis = np.arange(qs, qe)[:, None] >= np.arange(ks, ke)[None, :]
            if keep is not None:
                vis = vis & keep[..., None, ks:ke]
            s = np.where(vis, s, -np.inf)
            m_new = np.maximum(m, s.max(axis=-1, keepdims=True))
            finite = np.isfinite(m_new)
            m_safe = np.where(finite, m_new, 0.0)
            p = np.where(vis, np.exp(s - m_safe), 0.0)
            corr = np.where(np.isfinite(m), np.exp(m - m_safe), 0.0)
            l = l * corr + p.sum(axis=-1, keepdims=True)
            acc = acc * corr + np.matmul(p, v[..., ks:ke, :])
            m = m_new
        out[..., qs:qe, :] = np.divide(acc, l, out=np.zeros_like(acc), where=l > 0)
    return out
