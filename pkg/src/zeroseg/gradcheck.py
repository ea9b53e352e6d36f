"""Finite-difference verification for every differentiable kernel.

Each entry builds a small float64 problem, runs ``gradient_check`` (central
differences against the taped gradient), and must come in under KERNEL_TOL
relative error. The two full-model entries push one real gradient through
the complete stack: frozen encoder, prompt bank, adapter, decoder, and both
loss terms. Inputs are drawn from fixed seeds chosen so no routed-attention
affinity tie sits within probing distance of the finite-difference step.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .attention import (
    AttentionParams,
    RoutingConfig,
    cross_attention,
    global_self_attention,
    local_consensus_attention,
)
from .decoder import (
    ClassQueryDecoder,
    PixelQueryDecoder,
    TextAdapterParams,
    seg_logits,
    text_adapter,
)
from .encoders import pretrain_init, text_encoder, text_forward, vision_encoder, vision_forward
from .losses import dice_loss, focal_loss, stack_flat_logits
from .tensor import F64, Tensor, gradient_check, seeded_rng
from .vocab import TEMPLATES, class_token_ids, class_names, default_vocab
from .encoders import TextTemplate

KERNEL_TOL = 1e-4


def _r(stream, shape, seed=0):
    return Tensor(seeded_rng(seed, stream).standard_normal(shape))


def _scalar(x):
    return tz.tsum(tz.mul(x, x))


def _attn(seed, d=4, heads=2):
    return AttentionParams.seeded(seeded_rng(seed, "p"), d, heads, dtype=F64)


def _elementwise(x):
    y = tz.add(tz.mul(x, x), tz.exp(tz.mul(x, 0.3)))
    y = tz.sub(y, tz.div(x, 2.0))
    y = tz.add(y, tz.log(tz.add(tz.mul(x, x), 1.0)))
    return tz.tsum(tz.pow_const(y, 1.5))


def _structural(x):
    a = tz.reshape(x, (4, 6))
    b = tz.transpose(tz.narrow(a, 1, 1, 4), (1, 0))
    c = tz.concat([b, b], axis=1)
    picked = tz.take0(c, np.array([0, 2, 2, 1]))
    return _scalar(tz.chunk(picked, 2, axis=0)[1])


def _pixel_decoder(x_is_grid: bool):
    dec = PixelQueryDecoder.seeded(seeded_rng(31, "d"), 4, 2, 1,
                                   RoutingConfig(2, 2), mlp_ratio=2, dtype=F64)
    tap = _r("tap", (4, 4, 4), seed=31)
    t = _r("t", (3, 4), seed=31)
    grid = _r("v", (4, 4, 4), seed=32)

    if x_is_grid:
        return lambda x: _scalar(seg_logits(*dec.decode(x, [tap], t))), grid
    return lambda x: _scalar(seg_logits(*dec.decode(grid, [tap], x))), t


def _class_decoder():
    dec = ClassQueryDecoder.seeded(seeded_rng(33, "d"), 4, 2, 1, mlp_ratio=2,
                                   dtype=F64)
    grid = _r("v", (2, 2, 4), seed=33)
    return lambda x: _scalar(seg_logits(*dec.decode(grid, [], x))), _r("t", (3, 4), seed=34)


def _adapter():
    p = TextAdapterParams.seeded(seeded_rng(35, "a"), 4, dtype=F64)
    vg = _r("g", (4,), seed=35)
    return lambda x: _scalar(text_adapter(x, vg, p)), _r("t", (3, 4), seed=35)


def _focal():
    y = seeded_rng(36, "y").integers(0, 3, size=5)
    return lambda x: focal_loss(x, y), _r("x", (5, 3), seed=36)


def _dice():
    y = seeded_rng(37, "y").integers(0, 3, size=5)
    return lambda x: dice_loss(x, y), _r("x", (5, 3), seed=37)


def _full_model():
    """One tiny end-to-end model in float64; returns two (f, x0) problems,
    one varying the text prompt bank, one varying the image tokens."""
    vocab = default_vocab()
    tpl = TextTemplate(
        template_ids=np.asarray(vocab.encode(TEMPLATES[4]), dtype=np.int64),
        class_ids=class_token_ids(vocab, class_names()[:3]),
        end_id=vocab.end_id,
    )
    tenc = text_encoder(41, len(vocab), d=4, depth=2, heads=2, mlp_ratio=2,
                        dtype=F64)
    venc = vision_encoder(41, patch_dim=6, grid=4, d=4, depth=2, heads=2,
                          mlp_ratio=2, dtype=F64)
    bank = pretrain_init(tenc, tpl)
    adapter = TextAdapterParams.seeded(seeded_rng(41, "a"), 4, dtype=F64)
    dec = PixelQueryDecoder.seeded(seeded_rng(41, "d"), 4, 2, 1,
                                   RoutingConfig(2, 2), mlp_ratio=2, dtype=F64)
    tokens = Tensor(seeded_rng(42, "x").standard_normal((4, 4, 6)))
    y = seeded_rng(43, "y").integers(0, 3, size=16)

    def run(text_bank, toks):
        t = text_forward(tenc, text_bank, tpl)
        v_l, inters, v_g = vision_forward(venc, None, toks, taps=[1])
        t_new = text_adapter(t, v_g, adapter)
        s = seg_logits(*dec.decode(v_l, inters, t_new))
        flat = stack_flat_logits([s])
        return tz.add(focal_loss(flat, y), dice_loss(flat, y))

    def vary_bank(x):
        from .encoders import PromptBank
        layers = [x] + bank.layers[1:]
        return run(PromptBank(layers=layers, deep=True), tokens)

    def vary_tokens(x):
        return run(bank, x)

    return (vary_bank, Tensor(bank.layers[0].data.copy())), (vary_tokens, tokens)


def _problems():
    """Ordered (name, f, x0) table; every differentiable kernel appears once."""
    routing = RoutingConfig(2, 2)
    routed_p = _attn(21)
    pix_grid = _pixel_decoder(True)
    pix_rows = _pixel_decoder(False)
    cls_dec = _class_decoder()
    adapter = _adapter()
    focal = _focal()
    dice = _dice()
    (fm_bank, fm_bank_x), (fm_tok, fm_tok_x) = _full_model()
    w = _r("w", (3, 4), seed=2)
    b = _r("b", (4,), seed=2)
    gain = _r("gain", (5,), seed=3)
    bias = _r("bias", (5,), seed=3)
    other = _r("other", (4, 3, 5), seed=4)

    return [
        ("matmul", lambda x: _scalar(tz.matmul(x, other)), _r("x", (4, 6, 3), seed=5)),
        ("linear", lambda x: _scalar(tz.linear(x, w, b)), _r("x", (5, 3), seed=6)),
        ("softmax", lambda x: _scalar(tz.softmax(x, axis=-1)), _r("x", (3, 5), seed=7)),
        ("log_softmax", lambda x: _scalar(tz.log_softmax(x, axis=-1)), _r("x", (3, 5), seed=8)),
        ("layer_norm", lambda x: _scalar(tz.layer_norm(x, gain, bias)), _r("x", (3, 5), seed=9)),
        ("gelu", lambda x: _scalar(tz.gelu(x)), _r("x", (4, 4), seed=10)),
        ("avg_pool", lambda x: _scalar(tz.avg_pool2d(x, 2)), _r("x", (4, 4, 3), seed=11)),
        ("elementwise", _elementwise, Tensor(np.abs(seeded_rng(12, "x").standard_normal((3, 4))) + 0.5)),
        ("structural", _structural, _r("x", (4, 6), seed=13)),
        ("reductions", lambda x: tz.add(tz.tsum(tz.mul(x, x)),
                                        tz.tsum(tz.tmean(tz.exp(x), axis=0))),
         _r("x", (3, 4), seed=14)),
        ("global_attention", lambda x: _scalar(global_self_attention(x, _attn(20))), _r("x", (6, 4), seed=20)),
        ("cross_attention", lambda x: _scalar(cross_attention(x, _r("c", (3, 4), seed=21), _attn(22))), _r("x", (6, 4), seed=22)),
        ("routed_window_attention", lambda x: _scalar(local_consensus_attention(x, routed_p, routing)), _r("x", (4, 4, 4), seed=23)),
        ("text_adapter", adapter[0], adapter[1]),
        ("pixel_decoder_grid", pix_grid[0], pix_grid[1]),
        ("pixel_decoder_class_rows", pix_rows[0], pix_rows[1]),
        ("class_query_decoder", cls_dec[0], cls_dec[1]),
        ("focal_loss", focal[0], focal[1]),
        ("dice_loss", dice[0], dice[1]),
        ("full_model_text_path", fm_bank, fm_bank_x),
        ("full_model_vision_path", fm_tok, fm_tok_x),
    ]


def run_gradient_checks(corrupt: str | None = None) -> list:
    """Returns [(kernel, max_rel_err, tol)] rows. ``corrupt`` names a kernel
    whose result is falsified, for exercising failure handling."""
    rows = []
    for name, f, x0 in _problems():
        err = gradient_check(f, x0, h=1e-6)
        if corrupt == name:
            err = err + 1.0
        rows.append((name, err, KERNEL_TOL))
    return rows
