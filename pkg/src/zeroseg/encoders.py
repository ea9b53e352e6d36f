"""Frozen toy dual encoders and deep prompt tuning.

Both encoders are small pre-norm transformers with seeded, permanently
frozen weights standing in for pretrained towers. Sequences follow one
layout: [prompt slots; content tokens; one global token]. The prompt bank
overwrites the prompt slots at the input of every layer (deep mode) or only
at the first layer (shallow mode); prompt outputs computed by a layer are
discarded, so bank tensor i is consumed by layer i alone.

The text encoder is causal, which makes the template prefix independent of
the class tokens behind it; recording the template-span states of one probe
sentence therefore yields a prompt bank that reproduces the frozen
full-sentence forward bit for bit (pretrain initialization). Position rows
are added to content and global slots at embedding time only; prompt slots
carry whatever the bank holds (the pretrain-recorded states already include
their position rows).

Bit-exactness caveat that shapes this module: BLAS kernels are only
bit-stable per 2-D operand shape, so the plain (probe) path and the batched
prompted path must issue identical per-slice matmuls. Batching lives in
gufunc loop dims; nothing reshapes a batch into the matrix rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .attention import MASK_MIN, AttentionParams, multi_head_attention
from .tensor import ShapeError, Tensor


@dataclass
class SequenceLayout:
    """Spans [prompt; content; global] tiling a sequence."""

    prompt_len: int
    content_len: int
    global_len: int

    def __post_init__(self):
        if self.prompt_len < 0 or self.content_len <= 0 or self.global_len <= 0:
            raise ShapeError("layout needs content and global spans, prompt_len >= 0")

    @property
    def total(self) -> int:
        return self.prompt_len + self.content_len + self.global_len

    @property
    def content_start(self) -> int:
        return self.prompt_len

    @property
    def global_start(self) -> int:
        return self.prompt_len + self.content_len


@dataclass
class TextTemplate:
    """Template token ids plus per-class token ids and the end sentinel."""

    template_ids: np.ndarray  # (p,)
    class_ids: np.ndarray     # (c, k), uniform k
    end_id: int

    def __post_init__(self):
        self.template_ids = np.asarray(self.template_ids, dtype=np.int64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.template_ids.ndim != 1 or self.template_ids.size == 0:
            raise ShapeError("template must be a non-empty id vector")
        if self.class_ids.ndim != 2:
            raise ShapeError("class ids must be a (classes, tokens) matrix")

    @property
    def prompt_len(self) -> int:
        return int(self.template_ids.size)

    @property
    def class_len(self) -> int:
        return int(self.class_ids.shape[1])


@dataclass
class PromptBank:
    """Trainable prompt tensors, one per layer (deep) or a single one (shallow)."""

    layers: list[Tensor]
    deep: bool

    @property
    def prompt_len(self) -> int:
        return int(self.layers[0].shape[0]) if self.layers else 0

    def tensors(self) -> list[Tensor]:
        return list(self.layers)

    def set_trainable(self, flag: bool) -> None:
        for t in self.layers:
            t.trainable = flag
            t._requires = flag


@dataclass
class EncoderLayer:
    attn: AttentionParams
    norm1_g: Tensor
    norm1_b: Tensor
    norm2_g: Tensor
    norm2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def tensors(self) -> list[Tensor]:
        return self.attn.tensors() + [self.norm1_g, self.norm1_b, self.norm2_g,
                                      self.norm2_b, self.mlp_w1, self.mlp_b1,
                                      self.mlp_w2, self.mlp_b2]


_MASK_CACHE: dict[tuple[int, str], np.ndarray] = {}


def causal_mask(s: int, dtype) -> np.ndarray:
    key = (s, np.dtype(dtype).str)
    m = _MASK_CACHE.get(key)
    if m is None:
        m = np.triu(np.full((s, s), MASK_MIN, dtype=dtype), k=1)
        _MASK_CACHE[key] = m
    return m


@dataclass
class FrozenEncoder:
    """A seeded, frozen pre-norm transformer tower."""

    kind: str  # "text" | "vision"
    layers: list[EncoderLayer]
    width: int
    heads: int
    causal: bool
    pos: Tensor                      # (max_len, d), includes the global slot row
    token_table: Tensor | None = None   # text: (vocab, d)
    patch_w: Tensor | None = None       # vision: (patch_dim, d)
    patch_b: Tensor | None = None
    cls: Tensor | None = None           # vision: (1, d) global token embedding
    head_norm_g: Tensor | None = None   # text head: final norm + projection
    head_norm_b: Tensor | None = None
    head_w: Tensor | None = None
    head_b: Tensor | None = None

    @property
    def depth(self) -> int:
        return len(self.layers)

    def params(self) -> list[Tensor]:
        out = [self.pos]
        for name in ("token_table", "patch_w", "patch_b", "cls",
                     "head_norm_g", "head_norm_b", "head_w", "head_b"):
            t = getattr(self, name)
            if t is not None:
                out.append(t)
        for layer in self.layers:
            out.extend(layer.tensors())
        return out

    def layer_forward(self, i: int, x: Tensor) -> Tensor:
        ly = self.layers[i]
        mask = causal_mask(x.shape[-2], x.dtype) if self.causal else None
        h = tz.layer_norm(x, ly.norm1_g, ly.norm1_b)
        x = tz.add(x, multi_head_attention(h, h, ly.attn, mask=mask))
        h = tz.layer_norm(x, ly.norm2_g, ly.norm2_b)
        h = tz.linear(h, ly.mlp_w1, ly.mlp_b1)
        h = tz.gelu(h)
        h = tz.linear(h, ly.mlp_w2, ly.mlp_b2)
        return tz.add(x, h)


def _frozen(data) -> Tensor:
    return Tensor(data, trainable=False)


def _make_layers(rng, d, depth, heads, mlp_ratio, dtype) -> list[EncoderLayer]:
    layers = []
    hidden = mlp_ratio * d
    for _ in range(depth):
        layers.append(EncoderLayer(
            attn=AttentionParams.seeded(rng, d, heads, dtype=dtype, trainable=False),
            norm1_g=_frozen(np.ones(d, dtype=dtype)),
            norm1_b=_frozen(np.zeros(d, dtype=dtype)),
            norm2_g=_frozen(np.ones(d, dtype=dtype)),
            norm2_b=_frozen(np.zeros(d, dtype=dtype)),
            mlp_w1=_frozen(tz.randn(rng, (d, hidden), dtype, 1.0 / np.sqrt(d))),
            mlp_b1=_frozen(np.zeros(hidden, dtype=dtype)),
            mlp_w2=_frozen(tz.randn(rng, (hidden, d), dtype, 1.0 / np.sqrt(hidden))),
            mlp_b2=_frozen(np.zeros(d, dtype=dtype)),
        ))
    return layers


def text_encoder(seed: int, vocab_size: int, d: int = 32, depth: int = 4,
                 heads: int = 4, max_len: int = 16, mlp_ratio: int = 4,
                 dtype=tz.F32) -> FrozenEncoder:
    rng = tz.seeded_rng(seed, "text-encoder")
    return FrozenEncoder(
        kind="text",
        layers=_make_layers(rng, d, depth, heads, mlp_ratio, dtype),
        width=d, heads=heads, causal=True,
        pos=_frozen(tz.randn(rng, (max_len, d), dtype, 0.01)),
        token_table=_frozen(tz.randn(rng, (vocab_size, d), dtype, 0.02)),
        head_norm_g=_frozen(np.ones(d, dtype=dtype)),
        head_norm_b=_frozen(np.zeros(d, dtype=dtype)),
        head_w=_frozen(tz.randn(rng, (d, d), dtype, 1.0 / np.sqrt(d))),
        head_b=_frozen(np.zeros(d, dtype=dtype)),
    )


def vision_encoder(seed: int, patch_dim: int, grid: int, d: int = 32, depth: int = 4,
                   heads: int = 4, mlp_ratio: int = 4, dtype=tz.F32) -> FrozenEncoder:
    rng = tz.seeded_rng(seed, "vision-encoder")
    hw = grid * grid
    return FrozenEncoder(
        kind="vision",
        layers=_make_layers(rng, d, depth, heads, mlp_ratio, dtype),
        width=d, heads=heads, causal=False,
        pos=_frozen(tz.randn(rng, (hw + 1, d), dtype, 0.01)),
        patch_w=_frozen(tz.randn(rng, (patch_dim, d), dtype, 1.0 / np.sqrt(patch_dim))),
        patch_b=_frozen(np.zeros(d, dtype=dtype)),
        cls=_frozen(tz.randn(rng, (1, d), dtype, 0.02)),
    )


# ---------------------------------------------------------------------------
# forwards


@dataclass
class ForwardStates:
    """Per-layer content outputs and the final global state."""

    contents: list[Tensor]      # depth entries, each (..., content_len, d)
    final_global: Tensor        # (..., global_len, d)
    layout: SequenceLayout


def prompted_forward(enc: FrozenEncoder, bank: PromptBank | None,
                     content0: Tensor, global0: Tensor) -> ForwardStates:
    """Run the tower with prompt slots overwritten from the bank.

    ``content0``/``global0`` are embedded inputs of shape (..., T, d); a
    leading batch axis is allowed. With an empty bank this is the plain
    forward.
    """
    p = bank.prompt_len if bank is not None else 0
    tc = content0.shape[-2]
    tg = global0.shape[-2]
    layout = SequenceLayout(p, tc, tg)
    batch = content0.shape[:-2]
    if global0.shape[:-2] != batch:
        raise ShapeError("content and global batch shapes differ")

    def tile(t: Tensor) -> Tensor:
        if not batch:
            return t
        out = t
        for b in reversed(batch):
            out = tz.expand0(out, b)
        return out

    if p > 0:
        x = tz.concat([tile(bank.layers[0]), content0, global0], axis=-2)
    else:
        x = tz.concat([content0, global0], axis=-2)

    contents: list[Tensor] = []
    for i in range(enc.depth):
        if i > 0 and p > 0 and bank.deep:
            rest = tz.narrow(x, -2 % len(x.shape), layout.content_start, tc + tg)
            x = tz.concat([tile(bank.layers[i]), rest], axis=-2)
        x = enc.layer_forward(i, x)
        contents.append(tz.narrow(x, len(x.shape) - 2, layout.content_start, tc))

    final_global = tz.narrow(x, len(x.shape) - 2, layout.global_start, tg)
    return ForwardStates(contents=contents, final_global=final_global, layout=layout)


def embed_text(enc: FrozenEncoder, ids: np.ndarray, pos_offset: int = 0) -> Tensor:
    """Token rows plus position rows starting at ``pos_offset``.

    ids may be (t,) or batched (c, t); the position rows broadcast.
    """
    ids = np.asarray(ids, dtype=np.int64)
    t = ids.shape[-1]
    tok = tz.take0(enc.token_table, ids)
    pos = tz.narrow(enc.pos, 0, pos_offset, t)
    return tz.add(tok, pos)


def plain_text_forward(enc: FrozenEncoder, ids: np.ndarray,
                       record_inputs: bool = False):
    """Frozen full-sentence forward; optionally records each layer's input.

    For (c, t) batched ids every per-slice matmul has the same 2-D shape as
    the single-sentence call, so batched and per-sentence runs agree bit for
    bit.
    """
    x = embed_text(enc, ids, pos_offset=0)
    inputs = []
    for i in range(enc.depth):
        if record_inputs:
            inputs.append(x)
        x = enc.layer_forward(i, x)
    if record_inputs:
        return x, inputs
    return x


def pretrain_init(enc: FrozenEncoder, template: TextTemplate, deep: bool = True,
                  probe_class: int = 0) -> PromptBank:
    """Prompt bank recorded from the frozen encoder itself.

    Runs one probe sentence [template; class tokens; end] and records the
    template-span slice of every layer input. Causality makes those slices
    independent of the probe class, so the bank reproduces any class
    sentence's template states exactly.
    """
    if template.class_ids.shape[0] == 0:
        raise ShapeError("template carries no classes")
    p = template.prompt_len
    ids = np.concatenate([template.template_ids,
                          template.class_ids[probe_class],
                          np.asarray([template.end_id], dtype=np.int64)])
    _, inputs = plain_text_forward(enc, ids, record_inputs=True)
    recorded = [Tensor(np.ascontiguousarray(x.data[:p]), trainable=True)
                for x in inputs]
    if not deep:
        recorded = recorded[:1]
    return PromptBank(layers=recorded, deep=deep)


def random_text_bank(enc: FrozenEncoder, prompt_len: int, seed: int,
                     deep: bool = True) -> PromptBank:
    rng = tz.seeded_rng(seed, "text-prompts")
    n = enc.depth if deep else 1
    layers = [Tensor(tz.randn(rng, (prompt_len, enc.width), enc.pos.dtype, 0.02),
                     trainable=True) for _ in range(n)]
    return PromptBank(layers=layers, deep=deep)


def random_vision_bank(enc: FrozenEncoder, prompt_len: int, seed: int,
                       deep: bool = True) -> PromptBank:
    rng = tz.seeded_rng(seed, "vision-prompts")
    a = float(np.sqrt(6.0 / enc.width))
    n = enc.depth if deep else 1
    layers = [Tensor(tz.rand_uniform(rng, (prompt_len, enc.width), -a, a, enc.pos.dtype),
                     trainable=True) for _ in range(n)]
    return PromptBank(layers=layers, deep=deep)


def text_forward(enc: FrozenEncoder, bank: PromptBank | None, template: TextTemplate,
                 class_rows: np.ndarray | None = None, normalize: bool = True) -> Tensor:
    """Class embedding matrix T, one L2-normalized row per class.

    ``class_rows`` selects a subset of template.class_ids (the seen set
    during training); None means all classes.
    """
    ids = template.class_ids if class_rows is None else template.class_ids[class_rows]
    c, k = ids.shape
    p = bank.prompt_len if bank is not None else template.prompt_len
    content0 = embed_text(enc, ids, pos_offset=p)
    end = np.full((c, 1), template.end_id, dtype=np.int64)
    global0 = embed_text(enc, end, pos_offset=p + k)
    states = prompted_forward(enc, bank, content0, global0)
    z = tz.reshape(states.final_global, (c, enc.width))
    z = tz.layer_norm(z, enc.head_norm_g, enc.head_norm_b)
    t = tz.linear(z, enc.head_w, enc.head_b)
    if normalize:
        norm = tz.pow_const(tz.tsum(tz.mul(t, t), axis=-1, keepdims=True), 0.5)
        t = tz.div(t, norm)
    return t


def vision_forward(enc: FrozenEncoder, bank: PromptBank | None, patches: Tensor,
                   taps: list[int]):
    """Prompted vision tower over embedded patch vectors.

    ``patches``: (h, w, patch_dim) or (B, h, w, patch_dim) raw patch pixels.
    Returns (V_l, intermediates at ``taps`` in given order, V_g); grids keep
    (..., h, w, d) shape and V_g is (..., d).
    """
    *batch, h, w, pd = patches.shape
    hw = h * w
    flat = tz.reshape(patches, (*batch, hw, pd))
    emb = tz.linear(flat, enc.patch_w, enc.patch_b)
    pos_c = tz.narrow(enc.pos, 0, 0, hw)
    content0 = tz.add(emb, pos_c)
    g = tz.add(enc.cls, tz.narrow(enc.pos, 0, hw, 1))
    if batch:
        for b in reversed(batch):
            g = tz.expand0(g, b)
    states = prompted_forward(enc, bank, content0, g)
    for tp in taps:
        if not (0 <= tp < enc.depth):
            raise ShapeError(f"tap {tp} outside encoder depth {enc.depth}")
    v_l = tz.reshape(states.contents[-1], (*batch, h, w, enc.width))
    inters = [tz.reshape(states.contents[tp], (*batch, h, w, enc.width)) for tp in taps]
    v_g = tz.reshape(states.final_global, (*batch, enc.width))
    return v_l, inters, v_g
