"""Focal and dice losses against hand-computed oracles."""

from __future__ import annotations

import numpy as np
import pytest

import zeroseg.tensor as tz
from zeroseg.dataset import IGNORE_ID
from zeroseg.losses import dice_loss, focal_loss, seg_loss, stack_flat_logits
from zeroseg.tensor import F64, ShapeError, Tensor, gradient_check, seeded_rng


def test_focal_single_pixel_even_odds():
    # two classes, equal logits: p_t = 1/2, so the loss is (1/2)^2 * ln 2
    logits = Tensor(np.zeros((1, 2)))
    got = focal_loss(logits, np.array([0]), gamma=2.0).data
    assert abs(got - 0.25 * np.log(2.0)) < 1e-12


def test_focal_gamma_zero_is_cross_entropy():
    rng = seeded_rng(1, "f")
    x = rng.standard_normal((6, 4))
    y = rng.integers(0, 4, size=6)
    got = focal_loss(Tensor(x), y, gamma=0.0).data
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    assert abs(got + logp[np.arange(6), y].mean()) < 1e-10


def test_focal_downweights_confident_rows():
    # a confident correct row contributes almost nothing under gamma=2
    easy = Tensor(np.array([[12.0, 0.0], [0.0, 0.0]]))
    full = focal_loss(easy, np.array([0, 0]), gamma=2.0).data
    alone = focal_loss(Tensor(np.zeros((1, 2))), np.array([0]), gamma=2.0).data
    assert full == pytest.approx(alone / 2, rel=1e-4)
    assert focal_loss(easy, np.array([0, 0]), gamma=0.0).data > full


def test_ignored_rows_do_not_contribute():
    rng = seeded_rng(2, "f")
    x = rng.standard_normal((4, 3))
    y = np.array([0, 1, 2, 1])
    base_f = focal_loss(Tensor(x), y).data
    base_d = dice_loss(Tensor(x), y).data
    x2 = np.concatenate([x, np.full((2, 3), 1e4)], axis=0)
    y2 = np.concatenate([y, [IGNORE_ID, IGNORE_ID]])
    assert abs(focal_loss(Tensor(x2), y2).data - base_f) < 1e-12
    assert abs(dice_loss(Tensor(x2), y2).data - base_d) < 1e-12


def test_all_ignored_gives_zero():
    x = Tensor(np.ones((3, 2)))
    y = np.full(3, IGNORE_ID)
    assert focal_loss(x, y).data == 0.0
    assert dice_loss(x, y).data == 0.0


def test_dice_hand_oracle():
    x = np.array([[2.0, -1.0], [0.5, 0.5], [-1.0, 3.0]])
    y = np.array([0, 0, 1])
    probs = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    onehot = np.eye(2)[y]
    expect = 0.0
    for c in range(2):
        inter = (probs[:, c] * onehot[:, c]).sum()
        expect += 1 - (2 * inter + 1) / (probs[:, c].sum() + onehot[:, c].sum() + 1)
    expect /= 2
    got = dice_loss(Tensor(x), y, smooth=1.0).data
    assert abs(got - expect) < 1e-12


def test_dice_skips_absent_classes():
    # class 2 never appears in labels: changing only its probability mass
    # by adding a third column must not add a term for it
    x = np.array([[4.0, -4.0, 0.0], [-4.0, 4.0, 0.0]])
    y = np.array([0, 1])
    got = dice_loss(Tensor(x), y).data
    probs = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    expect = 0.0
    for c in range(2):
        onec = (y == c).astype(float)
        inter = (probs[:, c] * onec).sum()
        expect += 1 - (2 * inter + 1) / (probs[:, c].sum() + onec.sum() + 1)
    assert abs(got - expect / 2) < 1e-12


def test_dice_perfect_prediction_near_zero():
    x = np.array([[30.0, -30.0], [-30.0, 30.0]])
    y = np.array([0, 1])
    assert dice_loss(Tensor(x), y, smooth=0.0).data < 1e-8


def test_seg_loss_weighting():
    rng = seeded_rng(3, "w")
    x = Tensor(rng.standard_normal((8, 5)))
    y = rng.integers(0, 5, size=8)
    total, f, d = seg_loss(x, y, focal_weight=100.0, dice_weight=1.0)
    assert abs(total.data - (100.0 * f.data + d.data)) < 1e-10
    total2, _, _ = seg_loss(x, y, focal_weight=2.0, dice_weight=3.0)
    assert abs(total2.data - (2.0 * f.data + 3.0 * d.data)) < 1e-10


def test_stack_flat_logits_order():
    a = Tensor(np.arange(12, dtype=np.float64).reshape(3, 2, 2))
    b = Tensor(np.arange(12, 24, dtype=np.float64).reshape(3, 2, 2))
    flat = stack_flat_logits([a, b])
    assert flat.shape == (8, 3)
    assert np.array_equal(flat.data[0], a.data[:, 0, 0])
    assert np.array_equal(flat.data[3], a.data[:, 1, 1])
    assert np.array_equal(flat.data[4], b.data[:, 0, 0])
    with pytest.raises(ShapeError):
        stack_flat_logits([])


def test_label_length_checked():
    with pytest.raises(ShapeError):
        focal_loss(Tensor(np.zeros((3, 2))), np.zeros(4, dtype=np.int64))


def test_loss_gradients():
    rng = seeded_rng(4, "g")
    y = rng.integers(0, 3, size=5)
    x0 = Tensor(rng.standard_normal((5, 3)).astype(F64))
    assert gradient_check(lambda x: focal_loss(x, y), x0, h=1e-6) < 1e-6
    assert gradient_check(lambda x: dice_loss(x, y), x0, h=1e-6) < 1e-6
    y2 = y.copy()
    y2[2] = IGNORE_ID
    assert gradient_check(lambda x: seg_loss(x, y2)[0], x0, h=1e-6) < 1e-4


def test_loss_gradients_flow_through_stacking():
    # one tensor used as both batch images: gradients must accumulate
    rng = seeded_rng(5, "g")
    y = rng.integers(0, 2, size=8)
    x0 = Tensor(rng.standard_normal((2, 2, 2)).astype(F64))

    def f(x):
        flat = stack_flat_logits([x, x])
        return seg_loss(flat, y)[0]

    assert gradient_check(f, x0, h=1e-6) < 1e-4
