"""Decoder blocks, text adapter, and the segmentation logit head."""

from __future__ import annotations

import numpy as np
import pytest

import zeroseg.tensor as tz
from zeroseg.attention import RoutingConfig
from zeroseg.decoder import (
    ClassQueryDecoder,
    DecoderBlock,
    PixelQueryDecoder,
    TextAdapterParams,
    seg_logits,
    text_adapter,
)
from zeroseg.tensor import F64, GradientTape, ShapeError, Tensor, backward, gradient_check, seeded_rng


def rand(stream, shape, dtype=F64, seed=0):
    return seeded_rng(seed, stream).standard_normal(shape).astype(dtype)


def make_pixel_decoder(d=8, heads=2, blocks=2, window=2, selected=2, seed=1,
                       dtype=F64, trainable=False):
    rng = seeded_rng(seed, "decoder")
    dec = PixelQueryDecoder.seeded(rng, d, heads, blocks,
                                   RoutingConfig(window, selected),
                                   mlp_ratio=2, dtype=dtype, trainable=trainable)
    return dec


def zero_residual_branches(dec):
    """Zero every branch output map so each block becomes the identity."""
    for blk in dec.blocks:
        for t in (blk.conv_w, blk.conv_b,
                  blk.attn_local.w_out, blk.attn_local.b_out,
                  blk.attn_cross.w_out, blk.attn_cross.b_out,
                  blk.mlp_w2, blk.mlp_b2):
            t.data = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# text adapter


def test_text_adapter_hand_oracle():
    t = np.array([[1.0, 2.0], [3.0, 4.0]])
    v_g = np.array([10.0, 100.0])
    w = rand("w", (4, 2))
    b = np.array([0.5, -0.5])
    p = TextAdapterParams(w=Tensor(w), b=Tensor(b))
    out = text_adapter(Tensor(t), Tensor(v_g), p).data
    expect = np.concatenate([t * v_g, t], axis=1) @ w + b
    assert np.allclose(out, expect, atol=1e-12)
    assert out.shape == (2, 2)


def test_text_adapter_shape_errors():
    p = TextAdapterParams(w=Tensor(np.zeros((4, 2))), b=Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        text_adapter(Tensor(np.zeros((3, 2))), Tensor(np.zeros(3)), p)
    with pytest.raises(ShapeError):
        TextAdapterParams(w=Tensor(np.zeros((3, 2))), b=Tensor(np.zeros(2)))


def test_text_adapter_depends_on_image_descriptor():
    d = 4
    p = TextAdapterParams.seeded(seeded_rng(3, "a"), d, dtype=F64)
    t = Tensor(rand("t", (5, d), seed=3))
    a = text_adapter(t, Tensor(rand("g1", (d,), seed=3)), p).data
    b = text_adapter(t, Tensor(rand("g2", (d,), seed=3)), p).data
    assert not np.allclose(a, b)


# ---------------------------------------------------------------------------
# pixel-query decoder


def test_zeroed_branches_give_identity_decode_and_plain_logits():
    d, hw = 8, 4
    dec = make_pixel_decoder(d=d, blocks=2)
    zero_residual_branches(dec)
    v_l = Tensor(rand("v", (hw, hw, d), seed=5))
    taps = [Tensor(rand(f"tap{i}", (hw, hw, d), seed=5)) for i in range(2)]
    t_new = Tensor(rand("t", (6, d), seed=5))
    v_o, t_o = dec.decode(v_l, taps, t_new)
    assert np.array_equal(v_o.data, v_l.data)
    assert t_o is t_new
    logits = seg_logits(v_o, t_o).data
    expect = (t_new.data @ v_l.data.reshape(hw * hw, d).T).reshape(6, hw, hw)
    assert np.array_equal(logits, expect)


def test_conv_only_accumulates_tapped_features():
    d, g = 8, 4
    dec = make_pixel_decoder(d=d, blocks=2)
    zero_residual_branches(dec)
    for i, blk in enumerate(dec.blocks):
        blk.conv_w.data = rand(f"cw{i}", (d, d), seed=6)
        blk.conv_b.data = rand(f"cb{i}", (d,), seed=6)
    v_l = rand("v", (g, g, d), seed=7)
    taps = [rand(f"tap{i}", (g, g, d), seed=7) for i in range(2)]
    v_o, _ = dec.decode(Tensor(v_l), [Tensor(t) for t in taps], Tensor(rand("t", (3, d), seed=7)))
    expect = v_l.copy()
    for i in range(2):
        expect = expect + taps[i] @ dec.blocks[i].conv_w.data + dec.blocks[i].conv_b.data
    assert np.allclose(v_o.data, expect, atol=1e-12)


def test_decode_sees_class_rows_through_cross_attention():
    dec = make_pixel_decoder(blocks=1)
    v_l = Tensor(rand("v", (4, 4, 8), seed=8))
    taps = [Tensor(rand("tap", (4, 4, 8), seed=8))]
    t_a = Tensor(rand("ta", (5, 8), seed=8))
    t_b = Tensor(rand("tb", (5, 8), seed=9))
    va, _ = dec.decode(v_l, taps, t_a)
    vb, _ = dec.decode(v_l, taps, t_b)
    assert not np.allclose(va.data, vb.data)


def test_class_row_permutation_permutes_logits_and_keeps_grid():
    dec = make_pixel_decoder(blocks=2)
    v_l = Tensor(rand("v", (4, 4, 8), seed=10))
    taps = [Tensor(rand(f"tap{i}", (4, 4, 8), seed=10)) for i in range(2)]
    t = rand("t", (6, 8), seed=10)
    perm = np.array([3, 0, 5, 1, 4, 2])
    va, ta = dec.decode(v_l, taps, Tensor(t))
    vb, tb = dec.decode(v_l, taps, Tensor(t[perm]))
    assert np.allclose(va.data, vb.data, atol=1e-10)
    sa = seg_logits(va, ta).data
    sb = seg_logits(vb, tb).data
    assert np.allclose(sa[perm], sb, atol=1e-10)


def test_tap_count_must_match_blocks():
    dec = make_pixel_decoder(blocks=2)
    v = Tensor(rand("v", (4, 4, 8)))
    with pytest.raises(ShapeError):
        dec.decode(v, [v], Tensor(rand("t", (3, 8))))
    with pytest.raises(ShapeError):
        dec.blocks[0].forward(v, Tensor(rand("w", (2, 2, 8))), Tensor(rand("t", (3, 8))),
                              dec.routing)


def test_seg_logits_shapes_and_values():
    v = rand("v", (2, 2, 3), seed=11)
    t = rand("t", (4, 3), seed=11)
    s = seg_logits(Tensor(v), Tensor(t)).data
    assert s.shape == (4, 2, 2)
    for c in range(4):
        for i in range(2):
            for j in range(2):
                assert abs(s[c, i, j] - float(t[c] @ v[i, j])) < 1e-12
    with pytest.raises(ShapeError):
        seg_logits(Tensor(v), Tensor(rand("u", (4, 5))))


def test_gradients_reach_every_pixel_decoder_tensor():
    dec = make_pixel_decoder(blocks=2, trainable=True)
    adapter = TextAdapterParams.seeded(seeded_rng(12, "a"), 8, dtype=F64, trainable=True)
    v_l = Tensor(rand("v", (4, 4, 8), seed=12))
    taps = [Tensor(rand(f"tap{i}", (4, 4, 8), seed=12)) for i in range(2)]
    t = Tensor(rand("t", (5, 8), seed=12))
    v_g = Tensor(rand("g", (8,), seed=12))
    with GradientTape() as tape:
        t_new = text_adapter(t, v_g, adapter)
        v_o, t_o = dec.decode(v_l, taps, t_new)
        loss = tz.tsum(tz.mul(seg_logits(v_o, t_o), 1.0))
    g = backward(loss, tape)
    want = set(dec.tensors()) | set(adapter.tensors())
    assert set(g.keys()) == want
    for p in want:
        assert np.any(g[p] != 0)


def test_pixel_decoder_gradient_check():
    dec = make_pixel_decoder(d=4, heads=2, blocks=1, window=2, selected=1, seed=13)
    tap = Tensor(rand("tap", (4, 4, 4), seed=13))
    t_new = Tensor(rand("t", (3, 4), seed=13))

    def f(x):
        v_o, t_o = dec.decode(x, [tap], t_new)
        s = seg_logits(v_o, t_o)
        return tz.tsum(tz.mul(s, s))

    err = gradient_check(f, Tensor(rand("v", (4, 4, 4), seed=14)), h=1e-6)
    assert err < 1e-5


def test_pixel_decoder_gradient_check_through_class_rows():
    dec = make_pixel_decoder(d=4, heads=2, blocks=1, window=2, selected=2, seed=15)
    tap = Tensor(rand("tap", (4, 4, 4), seed=15))
    v_l = Tensor(rand("v", (4, 4, 4), seed=15))

    def f(x):
        v_o, t_o = dec.decode(v_l, [tap], x)
        s = seg_logits(v_o, t_o)
        return tz.tsum(tz.mul(s, s))

    err = gradient_check(f, Tensor(rand("t", (3, 4), seed=16)), h=1e-6)
    assert err < 1e-5


# ---------------------------------------------------------------------------
# class-query baseline


def test_class_query_decoder_never_updates_grid():
    rng = seeded_rng(20, "cq")
    dec = ClassQueryDecoder.seeded(rng, 8, 2, 2, mlp_ratio=2, dtype=F64)
    v_l = Tensor(rand("v", (4, 4, 8), seed=20))
    t = Tensor(rand("t", (5, 8), seed=20))
    v_o, t_o = dec.decode(v_l, [], t)
    assert v_o is v_l
    assert t_o.shape == (5, 8)
    assert not np.allclose(t_o.data, t.data)


def test_class_query_logits_differ_from_pixel_query():
    d = 8
    v_l = Tensor(rand("v", (4, 4, d), seed=21))
    t = Tensor(rand("t", (5, d), seed=21))
    cq = ClassQueryDecoder.seeded(seeded_rng(21, "cq"), d, 2, 2, mlp_ratio=2, dtype=F64)
    pq = make_pixel_decoder(d=d, blocks=2, seed=21)
    taps = [Tensor(rand(f"tap{i}", (4, 4, d), seed=21)) for i in range(2)]
    sa = seg_logits(*cq.decode(v_l, [], t)).data
    sb = seg_logits(*pq.decode(v_l, taps, t)).data
    assert sa.shape == sb.shape == (5, 4, 4)
    assert not np.allclose(sa, sb)


def test_class_query_gradient_check():
    dec = ClassQueryDecoder.seeded(seeded_rng(22, "cq"), 4, 2, 1, mlp_ratio=2, dtype=F64)
    v_l = Tensor(rand("v", (2, 2, 4), seed=22))

    def f(x):
        v_o, t_o = dec.decode(v_l, [], x)
        s = seg_logits(v_o, t_o)
        return tz.tsum(tz.mul(s, s))

    err = gradient_check(f, Tensor(rand("t", (3, 4), seed=23)), h=1e-6)
    assert err < 1e-5


def test_class_query_gradients_reach_every_tensor():
    dec = ClassQueryDecoder.seeded(seeded_rng(24, "cq"), 8, 2, 2, mlp_ratio=2,
                                   dtype=F64, trainable=True)
    v_l = Tensor(rand("v", (4, 4, 8), seed=24))
    t = Tensor(rand("t", (5, 8), seed=24))
    with GradientTape() as tape:
        v_o, t_o = dec.decode(v_l, [], t)
        loss = tz.tsum(tz.mul(seg_logits(v_o, t_o), 1.0))
    g = backward(loss, tape)
    assert set(g.keys()) == set(dec.tensors())


def test_shared_cross_norm_is_one_tensor_set():
    blk = DecoderBlock.seeded(seeded_rng(25, "b"), 8, 2, dtype=F64)
    ts = blk.tensors()
    assert len(ts) == len(set(map(id, ts)))
    # 2 conv + 3 norm pairs + 2 attention param sets of 4 + 4 mlp
    assert len(ts) == 2 + 6 + 8 + 4
