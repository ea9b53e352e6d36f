"""Attention kernels: dense global, cross, and routed window consensus.

All three share one projection layout: a fused query/key/value weight of
shape (d, 3d) whose last axis chunks into the Q, K, V maps, plus an output
projection (d, d). Scores are scaled by 1/sqrt(d_head) per head.

The routed kernel ("local consensus") partitions the grid into n x n
windows, scores window affinity on average-pooled features, and lets each
window attend only into its top-m most similar windows. Selection indices
are constants under differentiation; with m = total windows the kernel is
dense attention over the grid up to floating-point summation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import ShapeError, Tensor

# Additive mask value. Finite so every recorded array stays finite, yet the
# max-shifted softmax underflows its exponential to exact zero, so it blocks
# attention as completely as -inf would (and without NaN gradients).
MASK_MIN = -1e9


@dataclass
class AttentionParams:
    """Fused-projection multi-head attention parameters."""

    w_qkv: Tensor  # (d, 3d)
    b_qkv: Tensor | None
    w_out: Tensor  # (d, d)
    b_out: Tensor | None
    heads: int

    def __post_init__(self):
        d = self.w_qkv.shape[0]
        if self.w_qkv.shape != (d, 3 * d):
            raise ShapeError(f"w_qkv must be (d, 3d), got {self.w_qkv.shape}")
        if self.w_out.shape != (d, d):
            raise ShapeError(f"w_out must be (d, d), got {self.w_out.shape}")
        if self.b_qkv is not None and self.b_qkv.shape != (3 * d,):
            raise ShapeError("b_qkv must be (3d,)")
        if self.b_out is not None and self.b_out.shape != (d,):
            raise ShapeError("b_out must be (d,)")
        if self.heads < 1 or d % self.heads != 0:
            raise ShapeError(f"width {d} not divisible into {self.heads} heads")

    @property
    def width(self) -> int:
        return self.w_qkv.shape[0]

    @staticmethod
    def seeded(rng: np.random.Generator, d: int, heads: int, dtype=tz.F32,
               trainable: bool = False, scale: float | None = None) -> "AttentionParams":
        s = (1.0 / np.sqrt(d)) if scale is None else scale
        return AttentionParams(
            w_qkv=Tensor(tz.randn(rng, (d, 3 * d), dtype, s), trainable=trainable),
            b_qkv=Tensor(np.zeros(3 * d, dtype=dtype), trainable=trainable),
            w_out=Tensor(tz.randn(rng, (d, d), dtype, s), trainable=trainable),
            b_out=Tensor(np.zeros(d, dtype=dtype), trainable=trainable),
            heads=heads,
        )

    def tensors(self) -> list[Tensor]:
        out = [self.w_qkv, self.w_out]
        if self.b_qkv is not None:
            out.append(self.b_qkv)
        if self.b_out is not None:
            out.append(self.b_out)
        return out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., T, d) -> (..., heads, T, d//heads)"""
    *lead, t, d = x.shape
    y = tz.reshape(x, (*lead, t, heads, d // heads))
    nd = len(y.shape)
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return tz.transpose(y, perm)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., heads, T, dh) -> (..., T, heads*dh)"""
    *lead, h, t, dh = x.shape
    nd = len(x.shape)
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    y = tz.transpose(x, perm)
    return tz.reshape(y, (*lead, t, h * dh))


def _qkv_slices(p: AttentionParams):
    d = p.width
    w_q = tz.narrow(p.w_qkv, 1, 0, d)
    w_k = tz.narrow(p.w_qkv, 1, d, d)
    w_v = tz.narrow(p.w_qkv, 1, 2 * d, d)
    if p.b_qkv is None:
        return (w_q, None), (w_k, None), (w_v, None)
    return ((w_q, tz.narrow(p.b_qkv, 0, 0, d)),
            (w_k, tz.narrow(p.b_qkv, 0, d, d)),
            (w_v, tz.narrow(p.b_qkv, 0, 2 * d, d)))


def multi_head_attention(q_src: Tensor, kv_src: Tensor, p: AttentionParams,
                         mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Scaled dot-product attention over the last two axes.

    ``q_src`` and ``kv_src`` are (..., T, d); when they are the same tensor
    the fused projection is applied once. ``mask`` is an additive constant
    broadcast onto the score tensor (..., heads, Tq, Tk).
    """
    d = p.width
    if q_src.shape[-1] != d or kv_src.shape[-1] != d:
        raise ShapeError("feature width does not match attention params")
    if kv_src.shape[-2] == 0:
        raise ShapeError("attention over an empty key set")

    if q_src is kv_src:
        qkv = tz.linear(q_src, p.w_qkv, p.b_qkv)
        q, k, v = tz.chunk(qkv, 3, axis=-1)
    else:
        (w_q, b_q), (w_k, b_k), (w_v, b_v) = _qkv_slices(p)
        q = tz.linear(q_src, w_q, b_q)
        k = tz.linear(kv_src, w_k, b_k)
        v = tz.linear(kv_src, w_v, b_v)

    dh = d // p.heads
    qh = _split_heads(q, p.heads)
    kh = _split_heads(k, p.heads)
    vh = _split_heads(v, p.heads)
    scores = tz.mul(tz.matmul(qh, tz.mT(kh)), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = tz.add(scores, Tensor(np.asarray(mask, dtype=scores.dtype)))
    probs = tz.softmax(scores, axis=-1)
    out = tz.linear(_merge_heads(tz.matmul(probs, vh)), p.w_out, p.b_out)
    if return_weights:
        return out, probs.data
    return out


def global_self_attention(v: Tensor, p: AttentionParams) -> Tensor:
    """Dense self-attention over a flat (T, d) token sequence."""
    if len(v.shape) != 2:
        raise ShapeError("global_self_attention expects (tokens, d)")
    return multi_head_attention(v, v, p)


def cross_attention(v: Tensor, class_embed: Tensor, p: AttentionParams,
                    return_weights: bool = False):
    """Pixel queries attend over class embeddings (keys and values).

    Per-pixel attention weights form a convex combination over the c class
    rows, so the pre-projection output has rank at most c.
    """
    if len(v.shape) != 2 or len(class_embed.shape) != 2:
        raise ShapeError("cross_attention expects (pixels, d) and (classes, d)")
    if class_embed.shape[0] == 0:
        raise ShapeError("cross_attention needs at least one class")
    return multi_head_attention(v, class_embed, p, return_weights=return_weights)


@dataclass
class RoutingConfig:
    """Window partition and top-m selection for the routed kernel."""

    window: int
    selected: int

    def total(self, h: int, w: int) -> int:
        if h % self.window or w % self.window:
            raise ShapeError(f"grid {h}x{w} not divisible by window {self.window}")
        return (h // self.window) * (w // self.window)


def _to_windows(flat: Tensor, h: int, w: int, n: int) -> Tensor:
    """(h*w, d) row-major grid -> (windows, n*n, d), windows row-major."""
    d = flat.shape[-1]
    x = tz.reshape(flat, (h // n, n, w // n, n, d))
    x = tz.transpose(x, (0, 2, 1, 3, 4))
    return tz.reshape(x, ((h // n) * (w // n), n * n, d))


def _from_windows(win: Tensor, h: int, w: int, n: int) -> Tensor:
    d = win.shape[-1]
    x = tz.reshape(win, (h // n, w // n, n, n, d))
    x = tz.transpose(x, (0, 2, 1, 3, 4))
    return tz.reshape(x, (h * w, d))


def local_consensus_attention(v: Tensor, p: AttentionParams, r: RoutingConfig,
                              return_ids: bool = False):
    """Routed window self-attention over a (h, w, d) grid.

    Each n x n window pools to one descriptor; descriptor affinities pick the
    top-m windows per query window (ties to the lower index, no forced
    self-inclusion), and tokens attend densely into the union of the selected
    windows' tokens. Selection runs on values only and receives no gradient.
    """
    if len(v.shape) != 3:
        raise ShapeError("local_consensus_attention expects (h, w, d)")
    h, w, d = v.shape
    if d != p.width:
        raise ShapeError("feature width does not match attention params")
    n = r.window
    total = r.total(h, w)
    if not (1 <= r.selected <= total):
        raise ShapeError(f"selected={r.selected} out of range for {total} windows")

    pooled = tz.reshape(tz.avg_pool2d(v, n), (total, d))
    affinity = tz.matmul(pooled, tz.mT(pooled))
    ids = tz.topk_indices(affinity, r.selected)

    flat = tz.reshape(v, (h * w, d))
    qkv = tz.linear(flat, p.w_qkv, p.b_qkv)
    q, k, val = tz.chunk(qkv, 3, axis=-1)

    qw = _to_windows(q, h, w, n)
    kw = _to_windows(k, h, w, n)
    vw = _to_windows(val, h, w, n)
    ksel = tz.reshape(tz.take0(kw, ids), (total, r.selected * n * n, d))
    vsel = tz.reshape(tz.take0(vw, ids), (total, r.selected * n * n, d))

    dh = d // p.heads
    qh = _split_heads(qw, p.heads)
    kh = _split_heads(ksel, p.heads)
    vh = _split_heads(vsel, p.heads)
    scores = tz.mul(tz.matmul(qh, tz.mT(kh)), 1.0 / np.sqrt(dh))
    probs = tz.softmax(scores, axis=-1)
    merged = _merge_heads(tz.matmul(probs, vh))

    out = tz.linear(_from_windows(merged, h, w, n), p.w_out, p.b_out)
    out = tz.reshape(out, (h, w, d))
    if return_ids:
        return out, ids
    return out
