"""Confusion-matrix segmentation metrics for the seen/unseen protocol."""

from __future__ import annotations

import numpy as np

from .dataset import IGNORE_ID


def confusion_matrix(true: np.ndarray, pred: np.ndarray, n_classes: int,
                     ignore: int = IGNORE_ID) -> np.ndarray:
    """(n, n) count matrix, rows true class, columns predicted class.
    Positions whose true label is ``ignore`` are dropped."""
    true = np.asarray(true).reshape(-1)
    pred = np.asarray(pred).reshape(-1)
    if true.shape != pred.shape:
        raise ValueError("label arrays differ in size")
    keep = true != ignore
    t = true[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise ValueError("true label out of range")
    if p.size and (p.min() < 0 or p.max() >= n_classes):
        raise ValueError("predicted label out of range")
    return np.bincount(t * n_classes + p,
                       minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def iou_per_class(conf: np.ndarray) -> np.ndarray:
    """Intersection over union per class; NaN where the class never occurs
    in either role."""
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=1) + conf.sum(axis=0) - np.diag(conf)
    out = np.full(conf.shape[0], np.nan)
    nz = union > 0
    out[nz] = tp[nz] / union[nz]
    return out


def mean_iou(iou: np.ndarray, ids) -> float:
    vals = iou[np.asarray(list(ids), dtype=np.int64)]
    vals = vals[~np.isnan(vals)]
    return float(vals.mean()) if vals.size else 0.0


def pixel_accuracy(conf: np.ndarray) -> float:
    total = conf.sum()
    return float(np.diag(conf).sum() / total) if total else 0.0


def harmonic_iou(seen: float, unseen: float) -> float:
    if seen + unseen <= 0:
        return 0.0
    return 2.0 * seen * unseen / (seen + unseen)


def gzs3_metrics(conf: np.ndarray, seen_ids, unseen_ids) -> dict:
    """pAcc over everything, mIoU over the seen and unseen object classes
    (the background class is in the matrix but in neither id list), and
    their harmonic mean."""
    iou = iou_per_class(conf)
    s = mean_iou(iou, seen_ids)
    u = mean_iou(iou, unseen_ids)
    return {
        "pAcc": pixel_accuracy(conf),
        "mIoU_S": s,
        "mIoU_U": u,
        "hIoU": harmonic_iou(s, u),
    }
