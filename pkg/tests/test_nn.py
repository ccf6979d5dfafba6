from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blockscan.errors import (
    CorruptCheckpoint,
    InvalidBlock,
    NoMaskedPositions,
    OddDimension,
    RangeError,
    SequenceTooLong,
    ShapeError,
)
from blockscan.nn import (
    AdamState,
    AttentionMode,
    Checkpoint,
    ModelConfig,
    Precision,
    adam_step,
    attention,
    attention_tiled,
    backward,
    encoder_forward,
    init_params,
    load_checkpoint,
    lr_at,
    mlm_loss,
    rope_apply,
    save_checkpoint,
)
from blockscan.nn.functional import gelu, layer_norm

from oracles import fd_gradient_check, loop_attention, rotate_pairs


def small_cfg(**kw):
    base = dict(vocab_size=30, d_model=16, n_heads=2, n_layers=2, d_ff=32, max_len=20)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# config


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=6, n_heads=2)  # head_dim 3 is odd
    cfg = small_cfg(attention_mode=AttentionMode.CAUSAL, precision=Precision.F64)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.head_dim == 8 and cfg.rope_base == 10000


# ---------------------------------------------------------------------------
# rope


def test_rope_identity_at_origin():
    x = np.random.default_rng(0).normal(size=(1, 8))
    assert np.array_equal(rope_apply(x, [0]), x)


def test_rope_single_rotation():
    out = rope_apply(np.array([[1.0, 0.0]]), [1], rope_base=123.0)
    assert np.allclose(out, [[math.cos(1), math.sin(1)]], atol=1e-15)


def test_rope_matches_pairwise_rotation_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 8))
    pos = [0, 3, 7, 100, 1000]
    out = rope_apply(x, pos)
    for i, p in enumerate(pos):
        assert np.allclose(out[i], rotate_pairs(x[i], p), atol=1e-12)


def test_rope_errors():
    with pytest.raises(OddDimension):
        rope_apply(np.zeros((2, 3)), [0, 1])
    with pytest.raises(ShapeError):
        rope_apply(np.zeros((2, 4)), [0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 200), st.integers(0, 200), st.integers(0, 500))
def test_rope_relative_position(seed, p, p2, delta):
    rng = np.random.default_rng(seed)
    q, k = rng.normal(size=(1, 16)), rng.normal(size=(1, 16))
    a = float((rope_apply(q, [p]) @ rope_apply(k, [p2]).T)[0, 0])
    b = float((rope_apply(q, [p + delta]) @ rope_apply(k, [p2 + delta]).T)[0, 0])
    assert abs(a - b) < 1e-6 * max(1.0, abs(a))


# ---------------------------------------------------------------------------
# attention


def test_attention_examples():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(1, 4))
    assert np.allclose(attention(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), v), v)
    q = rng.normal(size=(5, 4))
    k = np.tile(rng.normal(size=(1, 4)), (5, 1))
    v = rng.normal(size=(5, 3))
    assert np.allclose(attention(q, k, v), np.tile(v.mean(axis=0), (5, 1)))
    out = attention(q, rng.normal(size=(5, 4)), v, causal=True)
    assert np.allclose(out[0], v[0])
    with pytest.raises(ShapeError):
        attention(q, np.zeros((5, 3)), v)


@pytest.mark.parametrize("causal", [False, True])
def test_attention_matches_loop_oracle(causal):
    rng = np.random.default_rng(3)
    q, k, v = rng.normal(size=(3, 7, 4))
    keep = np.array([1, 1, 0, 1, 1, 0, 1], dtype=bool)
    assert np.allclose(attention(q, k, v, causal, keep), loop_attention(q, k, v, causal, keep), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 20), st.booleans())
def test_attention_rows_are_convex_combinations(seed, n, causal):
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(3, n, 4))
    out = attention(q, k, v, causal)
    assert np.all(out >= v.min(axis=0) - 1e-12) and np.all(out <= v.max(axis=0) + 1e-12)


@pytest.mark.parametrize("block", [1, 2, 4, 7, 32, 100])
@pytest.mark.parametrize("causal", [False, True])
def test_tiled_matches_naive(block, causal):
    rng = np.random.default_rng(block)
    q, k, v = rng.normal(size=(3, 2, 32, 8)).astype(np.float32)
    keep = rng.random((2, 32)) > 0.2
    keep[:, 0] = True
    a = attention(q, k, v, causal, keep)
    b = attention_tiled(q, k, v, causal, keep, block)
    assert np.abs(a - b).max() < 1e-5


def test_tiled_single_tile_and_bad_block():
    rng = np.random.default_rng(4)
    q, k, v = rng.normal(size=(3, 9, 4))
    assert np.abs(attention_tiled(q, k, v, block=9) - attention(q, k, v)).max() < 1e-6
    with pytest.raises(InvalidBlock):
        attention_tiled(q, k, v, block=0)


# ---------------------------------------------------------------------------
# forward


def test_forward_shapes_and_errors():
    cfg = small_cfg()
    p = init_params(cfg, 0)
    h, logits = encoder_forward(cfg, p, [1, 2, 3])
    assert h.shape == (3, 16) and logits.shape == (3, 30)
    h, logits = encoder_forward(cfg, p, np.ones((2, 5), dtype=int))
    assert logits.shape == (2, 5, 30)
    with pytest.raises(SequenceTooLong):
        encoder_forward(cfg, p, [1] * 21)


def test_residual_identity_path():
    cfg = small_cfg()
    p = init_params(cfg, 0)
    for i in range(cfg.n_layers):
        p[f"layers.{i}.wo"][:] = 0
        p[f"layers.{i}.w2"][:] = 0
    ids = [3, 1, 4, 1, 5]
    h, logits = encoder_forward(cfg, p, ids)
    expect, _ = layer_norm(p["embed"][ids], p["lnf_g"], p["lnf_b"])
    assert np.allclose(h, expect, atol=1e-6)
    assert np.allclose(logits, expect @ p["embed"].T + p["out_bias"], atol=1e-5)


def test_padding_does_not_change_content_logits():
    cfg = small_cfg(precision=Precision.F64)
    p = init_params(cfg, 1, std=0.2)
    ids = [4, 8, 15, 16, 23]
    _, ref = encoder_forward(cfg, p, ids)
    for pad in (1, 6):
        padded = ids + [0] * pad
        mask = [True] * len(ids) + [False] * pad
        _, out = encoder_forward(cfg, p, padded, mask)
        assert np.abs(out[:5] - ref).max() < 1e-10


def test_forward_deterministic_and_tiled_equivalent():
    cfg = small_cfg()
    p = init_params(cfg, 2, std=0.2)
    ids = np.arange(17) % 30
    _, a = encoder_forward(cfg, p, ids)
    _, b = encoder_forward(cfg, p, ids)
    assert np.array_equal(a, b)
    _, c = encoder_forward(cfg, p, ids, attn_block=4)
    assert np.abs(a - c).max() < 1e-4


def test_gelu_reference_values():
    # tanh approximation evaluated by hand at a few points
    for x in (-3.0, -0.5, 0.0, 0.7, 2.0):
        ref = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
        assert abs(float(gelu(np.array(x))) - ref) < 1e-12


# ---------------------------------------------------------------------------
# loss and gradients


def test_mlm_loss_examples():
    v = 7
    assert abs(mlm_loss(np.zeros((3, v)), [1, 2, 3], [0, 2]) - math.log(v)) < 1e-12
    big = np.full((2, v), -1e4)
    big[[0, 1], [3, 5]] = 1e4
    assert mlm_loss(big, [3, 5], [0, 1]) < 1e-12
    with pytest.raises(NoMaskedPositions):
        mlm_loss(np.zeros((3, v)), [1, 2, 3], [])


@pytest.mark.parametrize("causal,pad", [(False, False), (True, False), (False, True)])
def test_gradients_match_finite_differences(causal, pad):
    assert fd_gradient_check(n_coords=60, seed=11, causal=causal, pad=pad) < 1e-3


def test_gradients_finite_and_near_zero_when_confident():
    cfg = small_cfg(precision=Precision.F64)
    p = init_params(cfg, 0)
    ids = [1, 2, 3, 4]
    g = backward(cfg, p, ids, ids, [1, 2])
    assert all(np.all(np.isfinite(x)) for x in g.values())
    # force a confident correct prediction through the output bias
    p["out_bias"][:] = -30.0
    p["out_bias"][2] = 30.0
    g = backward(cfg, p, ids, [0, 0, 2, 0], [2])
    assert max(float(np.abs(x).max()) for x in g.values()) < 1e-12


# ---------------------------------------------------------------------------
# optimizer and schedule


def test_adam_first_step_is_sign():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.3, -7.0])}
    st_ = AdamState.zeros_like(p)
    adam_step(p, g, st_, lr=0.1, eps=1e-12)
    assert np.allclose(p["w"], [0.9, -1.9])
    assert st_.step == 1


def test_adam_zero_gradient_is_noop_and_shape_check():
    p = {"w": np.array([1.0, 2.0])}
    st_ = AdamState.zeros_like(p)
    adam_step(p, {"w": np.zeros(2)}, st_, lr=0.1)
    assert np.array_equal(p["w"], [1.0, 2.0])
    with pytest.raises(ShapeError):
        adam_step(p, {"w": np.zeros(3)}, st_, lr=0.1)


def test_adam_matches_textbook_recurrence():
    rng = np.random.default_rng(0)
    w = rng.normal(size=4)
    p = {"w": w.copy()}
    st_ = AdamState.zeros_like(p)
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(p, {"w": g}, st_, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p["w"], w, atol=1e-14)


def test_lr_schedule():
    assert lr_at(0, 10, 100) == 0.0
    assert lr_at(10, 10, 100) == pytest.approx(5e-5)
    assert lr_at(100, 10, 100) == pytest.approx(0.0, abs=1e-20)
    assert lr_at(5, 10, 100) == pytest.approx(2.5e-5)
    assert lr_at(55, 10, 100) == pytest.approx(2.5e-5)
    with pytest.raises(RangeError):
        lr_at(101, 10, 100)
    with pytest.raises(RangeError):
        lr_at(1, 100, 100)


@given(st.integers(1, 50), st.integers(1, 200))
def test_lr_bounded_and_decaying(warm, extra):
    total = warm + extra
    lrs = [lr_at(s, warm, total, 1.0) for s in range(total + 1)]
    assert all(0.0 <= x <= 1.0 + 1e-12 for x in lrs)
    assert all(a >= b - 1e-12 for a, b in zip(lrs[warm:], lrs[warm + 1:]))


# ---------------------------------------------------------------------------
# checkpoint


def test_checkpoint_round_trip_bitwise(tmp_path):
    cfg = small_cfg(precision=Precision.F64)
    ck = Checkpoint(cfg, init_params(cfg, 3), {"epochs": 2, "loss_trace": [1.0, 0.5]})
    path = tmp_path / "m.ckpt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert back.config == cfg and back.meta == ck.meta
    for name, arr in ck.params.items():
        assert back.params[name].dtype == arr.dtype
        assert back.params[name].tobytes() == arr.tobytes()


def test_checkpoint_corruption(tmp_path):
    cfg = small_cfg()
    path = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint(cfg, init_params(cfg, 0), {}), path)
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "trunc.ckpt")
    header, body = raw.split(b"\n", 1)
    tampered = header.replace(b'"embed"', b'"embex"', 1)
    (tmp_path / "bad.ckpt").write_bytes(tampered + b"\n" + body)
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello\n")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "junk.ckpt")
