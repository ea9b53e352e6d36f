"""Frozen encoders, prompt banks, and the pretrain-init bit equivalence."""

from __future__ import annotations

import numpy as np
import pytest

import zeroseg.encoders as ze
import zeroseg.tensor as tz
import zeroseg.vocab as zv
from zeroseg.encoders import (
    PromptBank,
    SequenceLayout,
    TextTemplate,
    plain_text_forward,
    pretrain_init,
    prompted_forward,
    random_text_bank,
    random_vision_bank,
    text_encoder,
    text_forward,
    vision_encoder,
    vision_forward,
)
from zeroseg.tensor import F32, F64, GradientTape, ShapeError, Tensor, backward, seeded_rng


VOCAB = zv.default_vocab()


def make_template(plen=6):
    names = zv.class_names()
    return TextTemplate(
        template_ids=np.asarray(VOCAB.encode(zv.TEMPLATES[plen]), dtype=np.int64),
        class_ids=zv.class_token_ids(VOCAB, names),
        end_id=VOCAB.end_id,
    )


def test_sequence_layout_tiles():
    lay = SequenceLayout(6, 2, 1)
    assert lay.total == 9
    assert lay.content_start == 6
    assert lay.global_start == 8
    with pytest.raises(ShapeError):
        SequenceLayout(2, 0, 1)
    with pytest.raises(ShapeError):
        SequenceLayout(-1, 2, 1)


def test_template_validation():
    with pytest.raises(ShapeError):
        TextTemplate(template_ids=np.array([], dtype=np.int64),
                     class_ids=np.zeros((2, 2), dtype=np.int64), end_id=0)


def test_vocab_class_names_are_two_tokens():
    names = zv.class_names()
    assert len(names) == 17
    ids = zv.class_token_ids(VOCAB, names)
    assert ids.shape == (17, 2)
    # class id = shape * |colors| + color
    assert names[0] == "square red"
    assert names[1 * 4 + 2] == "disc blue"
    assert names[-1] == zv.BACKGROUND_NAME


def test_class_file_roundtrip(tmp_path):
    path = tmp_path / "classes.txt"
    names = zv.class_names()
    zv.write_class_file(path, names)
    assert zv.read_class_file(path) == names
    path2 = tmp_path / "bad.txt"
    path2.write_text("square red\nnot a class name\n")
    with pytest.raises(ValueError):
        zv.read_class_file(path2)


def test_promptless_forward_is_plain_forward():
    enc = vision_encoder(seed=1, patch_dim=12, grid=4, d=8, depth=2, heads=2, dtype=F64)
    rng = seeded_rng(2, "x")
    patches = Tensor(rng.standard_normal((4, 4, 12)))
    v_l, inters, v_g = vision_forward(enc, None, Tensor(patches.data, dtype=F64), taps=[0, 1])

    # independent plain loop
    flat = patches.data.reshape(16, 12) @ enc.patch_w.data + enc.patch_b.data
    x = np.concatenate([flat + enc.pos.data[:16], enc.cls.data + enc.pos.data[16:17]], axis=0)
    xt = Tensor(x, dtype=F64)
    for i in range(2):
        xt = enc.layer_forward(i, xt)
    assert np.array_equal(v_l.data.reshape(16, 8), xt.data[:16])
    assert np.array_equal(v_g.data, xt.data[16])
    assert np.array_equal(inters[1].data, v_l.data)


def test_deep_prompts_hand_unrolled():
    enc = vision_encoder(seed=3, patch_dim=6, grid=2, d=8, depth=2, heads=2, dtype=F64)
    bank = random_vision_bank(enc, prompt_len=3, seed=4, deep=True)
    for t in bank.layers:
        t.data = t.data.astype(np.float64)
    patches = Tensor(seeded_rng(5, "x").standard_normal((2, 2, 6)))

    v_l, _, v_g = vision_forward(enc, bank, Tensor(patches.data, dtype=F64), taps=[1])

    # manual unroll: overwrite prompt slots before each layer
    flat = patches.data.reshape(4, 6) @ enc.patch_w.data + enc.patch_b.data
    content = flat + enc.pos.data[:4]
    glob = enc.cls.data + enc.pos.data[4:5]
    x = np.concatenate([bank.layers[0].data, content, glob], axis=0)
    x = enc.layer_forward(0, Tensor(x, dtype=F64)).data
    x = np.concatenate([bank.layers[1].data, x[3:]], axis=0)
    x = enc.layer_forward(1, Tensor(x, dtype=F64)).data
    assert np.array_equal(v_l.data.reshape(4, 8), x[3:7])
    assert np.array_equal(v_g.data, x[7])


def test_shallow_prompts_evolve_after_layer0():
    enc = vision_encoder(seed=6, patch_dim=6, grid=2, d=8, depth=2, heads=2, dtype=F64)
    bank = random_vision_bank(enc, prompt_len=2, seed=7, deep=False)
    for t in bank.layers:
        t.data = t.data.astype(np.float64)
    assert len(bank.layers) == 1
    patches = Tensor(seeded_rng(8, "x").standard_normal((2, 2, 6)), dtype=F64)
    v_l, _, _ = vision_forward(enc, bank, patches, taps=[1])

    flat = patches.data.reshape(4, 6) @ enc.patch_w.data + enc.patch_b.data
    x = np.concatenate([bank.layers[0].data, flat + enc.pos.data[:4],
                        enc.cls.data + enc.pos.data[4:5]], axis=0)
    for i in range(2):  # no overwrite at layer 1
        x = enc.layer_forward(i, Tensor(x, dtype=F64)).data
    assert np.array_equal(v_l.data.reshape(4, 8), x[2:6])


# ---------------------------------------------------------------------------
# pretrain initialization


@pytest.mark.parametrize("seed", [11, 12])
def test_pretrain_bank_reproduces_frozen_forward_bitwise(seed):
    tpl = make_template(6)
    enc = text_encoder(seed, len(VOCAB), d=32, depth=4, heads=4)
    bank = pretrain_init(enc, tpl, deep=True)
    p, k = tpl.prompt_len, tpl.class_len
    c = tpl.class_ids.shape[0]

    # frozen full sentences, batched
    ids = np.concatenate([np.repeat(tpl.template_ids[None], c, axis=0),
                          tpl.class_ids,
                          np.full((c, 1), tpl.end_id)], axis=1)
    final, inputs = plain_text_forward(enc, ids, record_inputs=True)

    # bank layer i must equal the template span of layer i's input, any class
    for i, bt in enumerate(bank.layers):
        for j in range(c):
            assert np.array_equal(bt.data, inputs[i].data[j, :p])

    # prompted forward must match content/global states at every layer
    content0 = ze.embed_text(enc, tpl.class_ids, pos_offset=p)
    global0 = ze.embed_text(enc, np.full((c, 1), tpl.end_id), pos_offset=p + k)
    states = prompted_forward(enc, bank, content0, global0)
    for i in range(enc.depth - 1):
        nxt = inputs[i + 1].data
        assert np.array_equal(states.contents[i].data, nxt[:, p:p + k])
    assert np.array_equal(states.contents[-1].data, final.data[:, p:p + k])
    assert np.array_equal(states.final_global.data, final.data[:, p + k:])


def test_pretrain_bank_probe_independent():
    tpl = make_template(6)
    enc = text_encoder(21, len(VOCAB))
    b0 = pretrain_init(enc, tpl, probe_class=0)
    b1 = pretrain_init(enc, tpl, probe_class=9)
    for x, y in zip(b0.layers, b1.layers):
        assert np.array_equal(x.data, y.data)


def test_pretrain_bank_layer0_is_embedding_plus_positions():
    tpl = make_template(5)
    enc = text_encoder(22, len(VOCAB))
    bank = pretrain_init(enc, tpl)
    expect = enc.token_table.data[tpl.template_ids] + enc.pos.data[:tpl.prompt_len]
    assert np.array_equal(bank.layers[0].data, expect)


def test_different_templates_give_different_banks():
    enc = text_encoder(23, len(VOCAB))
    b6 = pretrain_init(enc, make_template(6))
    b4 = pretrain_init(enc, make_template(4))
    assert b6.layers[0].shape[0] == 6 and b4.layers[0].shape[0] == 4
    b5 = pretrain_init(enc, make_template(5))
    b4_again = pretrain_init(enc, make_template(4))
    assert not np.array_equal(b5.layers[1].data[:4], b4.layers[1].data)
    assert np.array_equal(b4.layers[0].data, b4_again.layers[0].data)


def test_pretrain_bank_is_trainable_and_deep():
    enc = text_encoder(24, len(VOCAB))
    bank = pretrain_init(enc, make_template(6), deep=True)
    assert len(bank.layers) == enc.depth
    assert all(t.trainable for t in bank.layers)
    shallow = pretrain_init(enc, make_template(6), deep=False)
    assert len(shallow.layers) == 1


def test_random_banks_reproducible():
    enc = text_encoder(25, len(VOCAB))
    a = random_text_bank(enc, 6, seed=1)
    b = random_text_bank(enc, 6, seed=1)
    c = random_text_bank(enc, 6, seed=2)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.layers, b.layers))
    assert not np.array_equal(a.layers[0].data, c.layers[0].data)
    venc = vision_encoder(26, patch_dim=12, grid=4)
    v = random_vision_bank(venc, 8, seed=1)
    assert len(v.layers) == venc.depth


# ---------------------------------------------------------------------------
# text and vision forwards


def test_text_forward_rows_unit_norm():
    tpl = make_template(6)
    enc = text_encoder(31, len(VOCAB))
    bank = pretrain_init(enc, tpl)
    t = text_forward(enc, bank, tpl).data
    assert t.shape == (17, 32)
    assert np.allclose(np.linalg.norm(t, axis=1), 1.0, atol=1e-5)
    raw = text_forward(enc, bank, tpl, normalize=False).data
    assert not np.allclose(np.linalg.norm(raw, axis=1), 1.0, atol=1e-3)


def test_text_forward_subset_rows_match_full():
    tpl = make_template(6)
    enc = text_encoder(32, len(VOCAB))
    bank = pretrain_init(enc, tpl)
    full = text_forward(enc, bank, tpl).data
    subset = np.array([0, 5, 11, 16])
    part = text_forward(enc, bank, tpl, class_rows=subset).data
    # causal tower + per-slice matmul batching: subset rows are bit-equal
    assert np.array_equal(part, full[subset])


def test_vision_forward_batched_bit_equals_single():
    enc = vision_encoder(33, patch_dim=12, grid=4, d=16, depth=2, heads=2)
    bank = random_vision_bank(enc, 4, seed=5)
    x = seeded_rng(34, "x").standard_normal((3, 4, 4, 12)).astype(np.float32)
    v_l, inters, v_g = vision_forward(enc, bank, Tensor(x), taps=[0, 1])
    for j in range(3):
        vj, ij, gj = vision_forward(enc, bank, Tensor(x[j]), taps=[0, 1])
        assert np.array_equal(v_l.data[j], vj.data)
        assert np.array_equal(v_g.data[j], gj.data)
        assert np.array_equal(inters[0].data[j], ij[0].data)


def test_vision_taps_validated():
    enc = vision_encoder(35, patch_dim=12, grid=4, d=16, depth=2, heads=2)
    x = Tensor(np.zeros((4, 4, 12), dtype=np.float32))
    with pytest.raises(ShapeError):
        vision_forward(enc, None, x, taps=[2])


def test_vision_prompts_influence_output():
    enc = vision_encoder(36, patch_dim=12, grid=4, d=16, depth=2, heads=2)
    bank = random_vision_bank(enc, 4, seed=6)
    x = Tensor(seeded_rng(37, "x").standard_normal((4, 4, 12)).astype(np.float32))
    a, _, _ = vision_forward(enc, bank, x, taps=[1])
    bank.layers[0].data = bank.layers[0].data + 1.0
    b, _, _ = vision_forward(enc, bank, x, taps=[1])
    assert not np.allclose(a.data, b.data)


def test_encoder_params_frozen_and_grads_reach_only_bank():
    tpl = make_template(6)
    enc = text_encoder(41, len(VOCAB), d=16, depth=2, heads=2)
    bank = pretrain_init(enc, tpl)
    assert all(not p.trainable for p in enc.params())
    with GradientTape() as tape:
        t = text_forward(enc, bank, tpl)
        loss = tz.tsum(tz.mul(t, t))
    g = backward(loss, tape)
    assert set(g.keys()) == set(bank.tensors())


def test_deep_bank_gradients_reach_every_layer():
    tpl = make_template(6)
    enc = text_encoder(42, len(VOCAB), d=16, depth=3, heads=2)
    bank = pretrain_init(enc, tpl, deep=True)
    with GradientTape() as tape:
        t = text_forward(enc, bank, tpl)
        loss = tz.tsum(tz.mul(t, t))
    g = backward(loss, tape)
    for bt in bank.layers:
        assert bt in g and np.any(g[bt] != 0)


def test_shallow_bank_gradient_only_layer0():
    enc = vision_encoder(43, patch_dim=12, grid=4, d=16, depth=3, heads=2)
    deep = random_vision_bank(enc, 4, seed=7, deep=True)
    shallow = PromptBank(layers=[deep.layers[0]], deep=False)
    x = Tensor(seeded_rng(44, "x").standard_normal((4, 4, 12)).astype(np.float32))
    with GradientTape() as tape:
        v_l, _, _ = vision_forward(enc, shallow, x, taps=[2])
        loss = tz.tsum(tz.mul(v_l, v_l))
    g = backward(loss, tape)
    assert shallow.layers[0] in g


def test_bank_set_trainable_freezes():
    enc = text_encoder(45, len(VOCAB), d=16, depth=2, heads=2)
    tpl = make_template(6)
    bank = pretrain_init(enc, tpl)
    bank.set_trainable(False)
    with GradientTape() as tape:
        t = text_forward(enc, bank, tpl)
        loss = tz.tsum(tz.mul(t, t))
    with pytest.raises(tz.TapeError):
        backward(loss, tape)  # nothing trainable anywhere: loss never taped
