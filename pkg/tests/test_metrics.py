"""Confusion-matrix metrics against brute-force oracles."""

from __future__ import annotations

import numpy as np
import pytest

from zeroseg.metrics import (
    confusion_matrix,
    gzs3_metrics,
    harmonic_iou,
    iou_per_class,
    mean_iou,
    pixel_accuracy,
)
from zeroseg.tensor import seeded_rng


def test_confusion_hand_case():
    true = np.array([0, 1, 1, 2])
    pred = np.array([0, 1, 0, 2])
    conf = confusion_matrix(true, pred, 3)
    assert np.array_equal(conf, [[1, 0, 0], [1, 1, 0], [0, 0, 1]])
    iou = iou_per_class(conf)
    assert np.allclose(iou, [0.5, 0.5, 1.0])
    assert pixel_accuracy(conf) == pytest.approx(0.75)


def test_confusion_drops_ignored():
    true = np.array([0, 255, 1])
    pred = np.array([0, 1, 1])
    conf = confusion_matrix(true, pred, 2)
    assert conf.sum() == 2
    assert np.array_equal(conf, [[1, 0], [0, 1]])


def test_confusion_range_checks():
    with pytest.raises(ValueError):
        confusion_matrix(np.array([3]), np.array([0]), 3)
    with pytest.raises(ValueError):
        confusion_matrix(np.array([0]), np.array([5]), 3)
    with pytest.raises(ValueError):
        confusion_matrix(np.array([0, 1]), np.array([0]), 3)


def test_confusion_accumulates():
    rng = seeded_rng(1, "m")
    a_t = rng.integers(0, 4, 50)
    a_p = rng.integers(0, 4, 50)
    b_t = rng.integers(0, 4, 30)
    b_p = rng.integers(0, 4, 30)
    joint = confusion_matrix(np.concatenate([a_t, b_t]), np.concatenate([a_p, b_p]), 4)
    assert np.array_equal(joint, confusion_matrix(a_t, a_p, 4) + confusion_matrix(b_t, b_p, 4))


def test_iou_against_set_oracle():
    rng = seeded_rng(2, "m")
    true = rng.integers(0, 5, 500)
    pred = rng.integers(0, 5, 500)
    true[rng.integers(0, 500, 40)] = 255
    conf = confusion_matrix(true, pred, 5)
    iou = iou_per_class(conf)
    keep = true != 255
    for c in range(5):
        t = set(np.nonzero(keep & (true == c))[0].tolist())
        p = set(np.nonzero(keep & (pred == c))[0].tolist())
        union = t | p
        if union:
            assert iou[c] == pytest.approx(len(t & p) / len(union))
        else:
            assert np.isnan(iou[c])


def test_absent_class_is_nan_and_skipped():
    conf = confusion_matrix(np.array([0, 0]), np.array([0, 0]), 3)
    iou = iou_per_class(conf)
    assert iou[0] == 1.0 and np.isnan(iou[1]) and np.isnan(iou[2])
    assert mean_iou(iou, [0, 1, 2]) == 1.0
    assert mean_iou(iou, [1, 2]) == 0.0


def test_harmonic_mean_values():
    assert harmonic_iou(0.0, 0.5) == 0.0
    assert harmonic_iou(0.0, 0.0) == 0.0
    assert harmonic_iou(0.4, 0.4) == pytest.approx(0.4)
    # published-style rounding checks
    assert round(harmonic_iou(43.2, 45.0), 1) == 44.1
    assert round(harmonic_iou(43.20, 45.02), 2) == 44.09


def test_gzs3_metrics_keys_and_split():
    # seen classes 0,1; unseen 2,3; background 4 counts only toward pAcc
    true = np.array([0, 0, 1, 2, 3, 4, 4])
    pred = np.array([0, 1, 1, 2, 2, 4, 3])
    conf = confusion_matrix(true, pred, 5)
    out = gzs3_metrics(conf, [0, 1], [2, 3])
    assert list(out.keys()) == ["pAcc", "mIoU_S", "mIoU_U", "hIoU"]
    iou = iou_per_class(conf)
    s = (iou[0] + iou[1]) / 2
    u = (iou[2] + iou[3]) / 2
    assert out["mIoU_S"] == pytest.approx(s)
    assert out["mIoU_U"] == pytest.approx(u)
    assert out["hIoU"] == pytest.approx(2 * s * u / (s + u))
    assert out["pAcc"] == pytest.approx(4 / 7)


def test_perfect_prediction():
    true = np.arange(5).repeat(3)
    conf = confusion_matrix(true, true, 5)
    out = gzs3_metrics(conf, [0, 1, 2], [3, 4])
    assert out == {"pAcc": 1.0, "mIoU_S": 1.0, "mIoU_U": 1.0, "hIoU": 1.0}
