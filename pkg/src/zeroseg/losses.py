"""Segmentation losses over flattened (position, class) logit rows.

The training loop scores each image as (classes, h, w); ``stack_flat_logits``
fuses a batch into one (positions, classes) tensor so a single loss value,
and a single backward pass, covers the whole batch. Ignored positions are
dropped before either term.

The focal term is -(1 - p_t)^gamma * log p_t averaged over kept positions;
the dice term averages 1 - (2 * overlap + s) / (mass_pred + mass_true + s)
over the classes present in the kept labels. The combined objective weights
them focal_weight : dice_weight (defaults 100 : 1).
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .dataset import IGNORE_ID
from .tensor import ShapeError, Tensor


def stack_flat_logits(per_image: list[Tensor]) -> Tensor:
    """[(c, h, w), ...] -> (sum of h*w, c), image order preserved."""
    if not per_image:
        raise ShapeError("empty batch")
    rows = []
    for s in per_image:
        c, h, w = s.shape
        rows.append(tz.mT(tz.reshape(s, (c, h * w))))
    return rows[0] if len(rows) == 1 else tz.concat(rows, axis=0)


def _kept(flat_logits: Tensor, labels: np.ndarray):
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != flat_logits.shape[0]:
        raise ShapeError("labels do not match logit rows")
    keep = np.nonzero(labels != IGNORE_ID)[0]
    return keep, labels[keep].astype(np.int64)


def focal_loss(flat_logits: Tensor, labels: np.ndarray, gamma: float = 2.0) -> Tensor:
    keep, y = _kept(flat_logits, labels)
    if keep.size == 0:
        return Tensor(np.zeros((), dtype=flat_logits.dtype))
    logits = tz.take0(flat_logits, keep)
    logp = tz.log_softmax(logits, axis=-1)
    lp_t = tz.take_per_row(logp, y)
    p_t = tz.exp(lp_t)
    w = tz.pow_const(tz.sub(1.0, p_t), gamma) if gamma != 0 else 1.0
    return tz.neg(tz.tmean(tz.mul(w, lp_t)))


def dice_loss(flat_logits: Tensor, labels: np.ndarray, smooth: float = 1.0) -> Tensor:
    keep, y = _kept(flat_logits, labels)
    if keep.size == 0:
        return Tensor(np.zeros((), dtype=flat_logits.dtype))
    logits = tz.take0(flat_logits, keep)
    n, c = logits.shape
    probs = tz.softmax(logits, axis=-1)
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), y] = 1
    ysum = onehot.sum(axis=0)
    present = np.nonzero(ysum > 0)[0]
    overlap = tz.gather_rows(tz.tsum(tz.mul(probs, Tensor(onehot)), axis=0), present)
    mass = tz.gather_rows(tz.tsum(probs, axis=0), present)
    num = tz.add(tz.mul(overlap, 2.0), smooth)
    den = tz.add(tz.add(mass, Tensor(ysum[present])), smooth)
    return tz.tmean(tz.sub(1.0, tz.div(num, den)))


def seg_loss(flat_logits: Tensor, labels: np.ndarray, *,
             focal_weight: float = 100.0, dice_weight: float = 1.0,
             gamma: float = 2.0, smooth: float = 1.0):
    """Weighted sum; returns (total, focal, dice) with the parts detached
    from naming only, all on the same tape."""
    f = focal_loss(flat_logits, labels, gamma)
    d = dice_loss(flat_logits, labels, smooth)
    total = tz.add(tz.mul(f, focal_weight), tz.mul(d, dice_weight))
    return total, f, d
