"""Segmentation decoders that match pixel features against class embeddings.

The pixel-query decoder refines the vision grid in N residual blocks. Each
block runs four steps in order:

    v = v_in + Conv(v_tap)          per-position linear injection of one
                                    tapped encoder feature map
    v = v + WindowAttn(Norm(v))     routed window self-attention
    v = v + Cross(Norm(v), Norm(t)) pixel queries over the adapted class
                                    embeddings; one shared Norm for both sides
    v = v + Mlp(Norm(v))

and the segmentation score for class c at cell (i, j) is the plain dot
product <t[c], v_out[i, j]>.

The class-query decoder is the reference baseline with the roles reversed:
the class embeddings are refined against a frozen pixel grid (self-attention
over classes, then cross-attention onto the pixels, then an MLP), and the
grid itself is never updated.

Both decoders share the routed window kernel; routing with every window
selected is dense global attention computed on the identical code path, so
swapping between the two settings changes only the selection count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .attention import (
    AttentionParams,
    RoutingConfig,
    local_consensus_attention,
    multi_head_attention,
)
from .tensor import ShapeError, Tensor


@dataclass
class TextAdapterParams:
    """Projection that folds the image-global descriptor into class rows."""

    w: Tensor  # (2d, d)
    b: Tensor  # (d,)

    def __post_init__(self):
        d = self.w.shape[1]
        if self.w.shape != (2 * d, d):
            raise ShapeError(f"adapter weight must be (2d, d), got {self.w.shape}")
        if self.b.shape != (d,):
            raise ShapeError("adapter bias must be (d,)")

    @staticmethod
    def seeded(rng: np.random.Generator, d: int, dtype=tz.F32,
               trainable: bool = False) -> "TextAdapterParams":
        return TextAdapterParams(
            w=Tensor(tz.randn(rng, (2 * d, d), dtype, 1.0 / np.sqrt(2 * d)),
                     trainable=trainable),
            b=Tensor(np.zeros(d, dtype=dtype), trainable=trainable),
        )

    def tensors(self) -> list[Tensor]:
        return [self.w, self.b]


def text_adapter(t: Tensor, v_g: Tensor, p: TextAdapterParams) -> Tensor:
    """t_new = Proj([t * v_g ; t]) with t (classes, d) and v_g (d,).

    Conditions every class embedding on the one image at hand, so unseen
    class rows inherit image context through the same map the seen rows
    were trained with.
    """
    if len(t.shape) != 2 or v_g.shape != (t.shape[1],):
        raise ShapeError("text_adapter expects t (classes, d) and v_g (d,)")
    fused = tz.mul(t, v_g)
    return tz.linear(tz.concat([fused, t], axis=-1), p.w, p.b)


def _mlp(x, w1, b1, w2, b2):
    return tz.linear(tz.gelu(tz.linear(x, w1, b1)), w2, b2)


def _norm_pair(d, dtype, trainable):
    return (Tensor(np.ones(d, dtype=dtype), trainable=trainable),
            Tensor(np.zeros(d, dtype=dtype), trainable=trainable))


@dataclass
class DecoderBlock:
    """One pixel-grid refinement block; see the module docstring for order."""

    conv_w: Tensor  # (d, d) per-position linear on the tapped features
    conv_b: Tensor
    norm1_g: Tensor
    norm1_b: Tensor
    attn_local: AttentionParams
    norm2_g: Tensor  # shared by the pixel and class sides of the cross step
    norm2_b: Tensor
    attn_cross: AttentionParams
    norm3_g: Tensor
    norm3_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @staticmethod
    def seeded(rng: np.random.Generator, d: int, heads: int, mlp_ratio: int = 4,
               dtype=tz.F32, trainable: bool = False) -> "DecoderBlock":
        n1 = _norm_pair(d, dtype, trainable)
        n2 = _norm_pair(d, dtype, trainable)
        n3 = _norm_pair(d, dtype, trainable)
        r = mlp_ratio * d
        return DecoderBlock(
            conv_w=Tensor(tz.randn(rng, (d, d), dtype, 1.0 / np.sqrt(d)),
                          trainable=trainable),
            conv_b=Tensor(np.zeros(d, dtype=dtype), trainable=trainable),
            norm1_g=n1[0], norm1_b=n1[1],
            attn_local=AttentionParams.seeded(rng, d, heads, dtype, trainable),
            norm2_g=n2[0], norm2_b=n2[1],
            attn_cross=AttentionParams.seeded(rng, d, heads, dtype, trainable),
            norm3_g=n3[0], norm3_b=n3[1],
            mlp_w1=Tensor(tz.randn(rng, (d, r), dtype, 1.0 / np.sqrt(d)),
                          trainable=trainable),
            mlp_b1=Tensor(np.zeros(r, dtype=dtype), trainable=trainable),
            mlp_w2=Tensor(tz.randn(rng, (r, d), dtype, 1.0 / np.sqrt(r)),
                          trainable=trainable),
            mlp_b2=Tensor(np.zeros(d, dtype=dtype), trainable=trainable),
        )

    def tensors(self) -> list[Tensor]:
        return ([self.conv_w, self.conv_b, self.norm1_g, self.norm1_b]
                + self.attn_local.tensors()
                + [self.norm2_g, self.norm2_b]
                + self.attn_cross.tensors()
                + [self.norm3_g, self.norm3_b,
                   self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2])

    def forward(self, v: Tensor, v_tap: Tensor, t_new: Tensor,
                routing: RoutingConfig, capture: list | None = None) -> Tensor:
        if v.shape != v_tap.shape:
            raise ShapeError(f"tap shape {v_tap.shape} != grid shape {v.shape}")
        h, w, d = v.shape
        v = tz.add(v, tz.linear(v_tap, self.conv_w, self.conv_b))
        v = tz.add(v, local_consensus_attention(
            tz.layer_norm(v, self.norm1_g, self.norm1_b), self.attn_local, routing))
        vn = tz.reshape(tz.layer_norm(v, self.norm2_g, self.norm2_b), (h * w, d))
        tn = tz.layer_norm(t_new, self.norm2_g, self.norm2_b)
        if capture is None:
            ca = multi_head_attention(vn, tn, self.attn_cross)
        else:
            ca, wts = multi_head_attention(vn, tn, self.attn_cross,
                                           return_weights=True)
            capture.append(wts)
        v = tz.add(v, tz.reshape(ca, (h, w, d)))
        v = tz.add(v, _mlp(tz.layer_norm(v, self.norm3_g, self.norm3_b),
                           self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2))
        return v


@dataclass
class PixelQueryDecoder:
    blocks: list[DecoderBlock]
    routing: RoutingConfig

    @staticmethod
    def seeded(rng: np.random.Generator, d: int, heads: int, n_blocks: int,
               routing: RoutingConfig, mlp_ratio: int = 4, dtype=tz.F32,
               trainable: bool = False) -> "PixelQueryDecoder":
        blocks = [DecoderBlock.seeded(rng, d, heads, mlp_ratio, dtype, trainable)
                  for _ in range(n_blocks)]
        return PixelQueryDecoder(blocks=blocks, routing=routing)

    def tensors(self) -> list[Tensor]:
        return [t for blk in self.blocks for t in blk.tensors()]

    def decode(self, v_l: Tensor, taps: list[Tensor], t_new: Tensor,
               capture: list | None = None):
        """Refine v_l through the blocks; returns (grid, class rows) whose
        dot products are the segmentation logits. ``capture``, if a list,
        collects each block's cross-attention weights."""
        if len(taps) != len(self.blocks):
            raise ShapeError(f"{len(self.blocks)} blocks need {len(self.blocks)} "
                             f"tapped feature maps, got {len(taps)}")
        v = v_l
        for blk, v_tap in zip(self.blocks, taps):
            v = blk.forward(v, v_tap, t_new, self.routing, capture=capture)
        return v, t_new


@dataclass
class ClassQueryBlock:
    """Refines class embeddings against a frozen pixel grid."""

    norm1_g: Tensor
    norm1_b: Tensor
    attn_self: AttentionParams
    norm2_g: Tensor  # shared by the class and pixel sides of the cross step
    norm2_b: Tensor
    attn_cross: AttentionParams
    norm3_g: Tensor
    norm3_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @staticmethod
    def seeded(rng: np.random.Generator, d: int, heads: int, mlp_ratio: int = 4,
               dtype=tz.F32, trainable: bool = False) -> "ClassQueryBlock":
        n1 = _norm_pair(d, dtype, trainable)
        n2 = _norm_pair(d, dtype, trainable)
        n3 = _norm_pair(d, dtype, trainable)
        r = mlp_ratio * d
        return ClassQueryBlock(
            norm1_g=n1[0], norm1_b=n1[1],
            attn_self=AttentionParams.seeded(rng, d, heads, dtype, trainable),
            norm2_g=n2[0], norm2_b=n2[1],
            attn_cross=AttentionParams.seeded(rng, d, heads, dtype, trainable),
            norm3_g=n3[0], norm3_b=n3[1],
            mlp_w1=Tensor(tz.randn(rng, (d, r), dtype, 1.0 / np.sqrt(d)),
                          trainable=trainable),
            mlp_b1=Tensor(np.zeros(r, dtype=dtype), trainable=trainable),
            mlp_w2=Tensor(tz.randn(rng, (r, d), dtype, 1.0 / np.sqrt(r)),
                          trainable=trainable),
            mlp_b2=Tensor(np.zeros(d, dtype=dtype), trainable=trainable),
        )

    def tensors(self) -> list[Tensor]:
        return ([self.norm1_g, self.norm1_b] + self.attn_self.tensors()
                + [self.norm2_g, self.norm2_b] + self.attn_cross.tensors()
                + [self.norm3_g, self.norm3_b,
                   self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2])

    def forward(self, t: Tensor, v_flat: Tensor,
                capture: list | None = None) -> Tensor:
        h = tz.layer_norm(t, self.norm1_g, self.norm1_b)
        t = tz.add(t, multi_head_attention(h, h, self.attn_self))
        tn = tz.layer_norm(t, self.norm2_g, self.norm2_b)
        vn = tz.layer_norm(v_flat, self.norm2_g, self.norm2_b)
        if capture is None:
            ca = multi_head_attention(tn, vn, self.attn_cross)
        else:
            ca, wts = multi_head_attention(tn, vn, self.attn_cross,
                                           return_weights=True)
            capture.append(wts)
        t = tz.add(t, ca)
        t = tz.add(t, _mlp(tz.layer_norm(t, self.norm3_g, self.norm3_b),
                           self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2))
        return t


@dataclass
class ClassQueryDecoder:
    blocks: list[ClassQueryBlock]

    @staticmethod
    def seeded(rng: np.random.Generator, d: int, heads: int, n_blocks: int,
               mlp_ratio: int = 4, dtype=tz.F32,
               trainable: bool = False) -> "ClassQueryDecoder":
        blocks = [ClassQueryBlock.seeded(rng, d, heads, mlp_ratio, dtype, trainable)
                  for _ in range(n_blocks)]
        return ClassQueryDecoder(blocks=blocks)

    def tensors(self) -> list[Tensor]:
        return [t for blk in self.blocks for t in blk.tensors()]

    def decode(self, v_l: Tensor, taps: list[Tensor], t_new: Tensor,
               capture: list | None = None):
        """Refine the class rows against v_l; the grid passes through
        untouched and the tapped feature maps are unused."""
        h, w, d = v_l.shape
        flat = tz.reshape(v_l, (h * w, d))
        t = t_new
        for blk in self.blocks:
            t = blk.forward(t, flat, capture=capture)
        return v_l, t


def seg_logits(v: Tensor, t: Tensor) -> Tensor:
    """Score grid: s[c, i, j] = <t[c], v[i, j]>, shape (classes, h, w)."""
    if len(v.shape) != 3 or len(t.shape) != 2 or v.shape[-1] != t.shape[-1]:
        raise ShapeError("seg_logits expects v (h, w, d) and t (classes, d)")
    h, w, d = v.shape
    flat = tz.reshape(v, (h * w, d))
    s = tz.matmul(t, tz.mT(flat))
    return tz.reshape(s, (t.shape[0], h, w))
