"""End-to-end experiment pipeline: model assembly, training, evaluation.

The model couples two frozen encoders through trainable glue: prompt banks
inside both towers, a text adapter that conditions class embeddings on the
image's global descriptor, and a decoder that matches pixels against those
embeddings. Training sees only the seen object classes plus background
(class names of held-out classes never enter any forward pass); evaluation
scores all classes at once and reports seen/unseen means separately.

Determinism contract: every random choice derives from config.seed through
named generator streams, batches are drawn per-iteration from their own
stream, and evaluation runs tape-free. Two runs of the same config produce
bit-identical loss traces, metrics, and checkpoints.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import vocab as zv
from .attention import RoutingConfig
from .config import ExperimentConfig
from .dataset import (
    BACKGROUND_ID,
    IGNORE_ID,
    N_OBJECT_CLASSES,
    patch_labels,
    patch_tokens,
    render_sample,
    split_class_ids,
    upsample_patch_predictions,
)
from .decoder import (
    ClassQueryDecoder,
    PixelQueryDecoder,
    TextAdapterParams,
    seg_logits,
    text_adapter,
)
from .encoders import (
    FrozenEncoder,
    PromptBank,
    TextTemplate,
    pretrain_init,
    random_text_bank,
    random_vision_bank,
    text_encoder,
    text_forward,
    vision_encoder,
    vision_forward,
)
from .losses import seg_loss, stack_flat_logits
from .metrics import confusion_matrix, gzs3_metrics
from .optim import AdamW, poly_lr
from .tensor import GradientTape, Tensor, backward, seeded_rng


@dataclass
class Model:
    cfg: ExperimentConfig
    vocab: zv.Vocabulary
    template: TextTemplate
    text_enc: FrozenEncoder
    vis_enc: FrozenEncoder
    text_bank: PromptBank
    vis_bank: PromptBank | None
    adapter: TextAdapterParams
    decoder: object
    seen_ids: list
    unseen_ids: list

    def train_class_ids(self) -> list:
        """Classes whose names the training loop may use: seen + background."""
        return list(self.seen_ids) + [BACKGROUND_ID]

    def all_class_ids(self) -> list:
        return list(range(N_OBJECT_CLASSES + 1))

    def named_trainables(self) -> list:
        out = []
        for i, t in enumerate(self.text_bank.layers):
            if t.trainable:
                out.append((f"text_prompt.{i}", t))
        if self.vis_bank is not None:
            for i, t in enumerate(self.vis_bank.layers):
                if t.trainable:
                    out.append((f"vision_prompt.{i}", t))
        _collect_fields("adapter", self.adapter, out)
        for i, blk in enumerate(self.decoder.blocks):
            _collect_fields(f"decoder.{i}", blk, out)
        return out

    def trainable_tensors(self) -> list:
        return [t for _, t in self.named_trainables()]


def _collect_fields(prefix: str, obj, out: list) -> None:
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, Tensor):
            if v.trainable:
                out.append((f"{prefix}.{f.name}", v))
        elif dataclasses.is_dataclass(v) and not isinstance(v, type):
            _collect_fields(f"{prefix}.{f.name}", v, out)


def build_model(cfg: ExperimentConfig) -> Model:
    cfg.validate()
    vocab = zv.default_vocab()
    names = zv.class_names()
    template = TextTemplate(
        template_ids=np.asarray(vocab.encode(zv.TEMPLATES[cfg.text_prompt_len]),
                                dtype=np.int64),
        class_ids=zv.class_token_ids(vocab, names),
        end_id=vocab.end_id,
    )
    d = cfg.embed_dim
    text_enc = text_encoder(cfg.seed, len(vocab), d=d, depth=cfg.encoder_layers,
                            heads=cfg.encoder_heads)
    vis_enc = vision_encoder(cfg.seed, patch_dim=cfg.patch_size ** 2 * 3,
                             grid=cfg.grid, d=d, depth=cfg.encoder_layers,
                             heads=cfg.encoder_heads)

    if cfg.prompt_init == "pretrain":
        text_bank = pretrain_init(text_enc, template, deep=True)
    else:
        text_bank = random_text_bank(text_enc, cfg.text_prompt_len, cfg.seed)
    if cfg.prompt_mode == "vision-only":
        text_bank.set_trainable(False)

    vis_bank = None
    if cfg.prompt_mode != "language-only":
        vis_bank = random_vision_bank(vis_enc, cfg.vision_prompt_len, cfg.seed)

    adapter = TextAdapterParams.seeded(seeded_rng(cfg.seed, "adapter"), d,
                                       trainable=True)
    routing = RoutingConfig(cfg.window_size, cfg.routing_selected())
    dec_rng = seeded_rng(cfg.seed, "decoder")
    if cfg.decoder == "pixel-query":
        decoder = PixelQueryDecoder.seeded(dec_rng, d, cfg.decoder_heads,
                                           cfg.decoder_blocks, routing,
                                           mlp_ratio=cfg.mlp_ratio, trainable=True)
    else:
        decoder = ClassQueryDecoder.seeded(dec_rng, d, cfg.decoder_heads,
                                           cfg.decoder_blocks,
                                           mlp_ratio=cfg.mlp_ratio, trainable=True)

    seen, unseen = split_class_ids(list(cfg.unseen))
    return Model(cfg=cfg, vocab=vocab, template=template, text_enc=text_enc,
                 vis_enc=vis_enc, text_bank=text_bank, vis_bank=vis_bank,
                 adapter=adapter, decoder=decoder, seen_ids=seen,
                 unseen_ids=unseen)


# ---------------------------------------------------------------------------
# data


@dataclass
class Split:
    images: np.ndarray        # (n, h, w, 3) float32
    tokens: np.ndarray        # (n, g, g, patch*patch*3) float32
    patch_labels: np.ndarray  # (n, g, g) uint8
    pixel_labels: np.ndarray  # (n, h, w) uint8


def synth_split(cfg: ExperimentConfig, tag: str, classes, count: int,
                round_robin: bool = False) -> Split:
    images, toks, plabs, labs = [], [], [], []
    for i in range(count):
        img, lab = render_sample(cfg.seed, i, classes, tag,
                                 image_size=cfg.image_size, patch=cfg.patch_size,
                                 min_objects=cfg.min_objects,
                                 max_objects=cfg.max_objects,
                                 round_robin=round_robin)
        images.append(img)
        toks.append(patch_tokens(img, cfg.patch_size))
        plabs.append(patch_labels(lab, cfg.patch_size))
        labs.append(lab)
    return Split(images=np.stack(images), tokens=np.stack(toks),
                 patch_labels=np.stack(plabs), pixel_labels=np.stack(labs))


def _row(x: Tensor, b: int) -> Tensor:
    """Select index b of axis 0 and drop the axis."""
    import zeroseg.tensor as tz
    return tz.reshape(tz.narrow(x, 0, b, 1), x.shape[1:])


def batch_logits(model: Model, tokens: np.ndarray, t: Tensor,
                 capture: list | None = None) -> list:
    """Per-image (classes, g, g) score tensors for a (b, g, g, pd) batch.

    The vision tower runs once over the whole batch; adapter and decoder run
    per image because each image conditions the class rows on its own global
    descriptor.
    """
    v_l, inters, v_g = vision_forward(model.vis_enc, model.vis_bank,
                                      Tensor(tokens), model.cfg.taps())
    out = []
    for b in range(tokens.shape[0]):
        t_new = text_adapter(t, _row(v_g, b), model.adapter)
        v_o, t_o = model.decoder.decode(_row(v_l, b), [_row(x, b) for x in inters],
                                        t_new, capture=capture)
        out.append(seg_logits(v_o, t_o))
    return out


def class_text(model: Model, class_rows=None) -> Tensor:
    return text_forward(model.text_enc, model.text_bank, model.template,
                        class_rows=None if class_rows is None
                        else np.asarray(class_rows, dtype=np.int64),
                        normalize=model.cfg.normalize_text)


# ---------------------------------------------------------------------------
# training


def _column_map(class_ids) -> np.ndarray:
    """Label id -> logit column; everything else maps to ignore."""
    col = np.full(256, IGNORE_ID, dtype=np.int64)
    for j, cid in enumerate(class_ids):
        col[cid] = j
    return col


def train(cfg: ExperimentConfig, progress=None):
    """Runs the full training loop; returns (model, trace) where trace is a
    list of (total, focal, dice) floats per iteration."""
    model = build_model(cfg)
    split = synth_split(cfg, "train", model.seen_ids, cfg.n_train)

    train_ids = model.train_class_ids()
    present = set(np.unique(split.patch_labels).tolist()) - {IGNORE_ID}
    leaked = present - set(train_ids)
    if leaked:
        raise AssertionError(f"training labels contain held-out classes {sorted(leaked)}")
    col = _column_map(train_ids)

    params = model.trainable_tensors()
    opt = AdamW(params, lr0=cfg.lr0, beta1=cfg.beta1, beta2=cfg.beta2,
                eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    class_rows = np.asarray(train_ids, dtype=np.int64)

    trace = []
    for it in range(cfg.iterations):
        ids = seeded_rng(cfg.seed, f"batch-{it}").integers(0, cfg.n_train,
                                                           size=cfg.batch_size)
        tokens = split.tokens[ids]
        labels = col[split.patch_labels[ids].reshape(-1)]
        with GradientTape() as tape:
            t = class_text(model, class_rows)
            logits = batch_logits(model, tokens, t)
            flat = stack_flat_logits(logits)
            total, focal, dice = seg_loss(
                flat, labels, focal_weight=cfg.focal_weight,
                dice_weight=cfg.dice_weight, gamma=cfg.focal_gamma,
                smooth=cfg.dice_smooth)
        grads = backward(total, tape)
        opt.step(grads, lr=poly_lr(it, cfg.iterations, cfg.lr0))
        trace.append((float(total.data), float(focal.data), float(dice.data)))
        if progress is not None:
            progress(it, trace[-1])
    return model, trace


# ---------------------------------------------------------------------------
# evaluation


def _shuffled_rows(t: Tensor, unseen_ids) -> Tensor:
    """Cyclically reassigns the unseen classes' text rows among themselves,
    keeping every other row in place. With one unseen class this is the
    identity; the protocol uses at least two."""
    import zeroseg.tensor as tz
    perm = np.arange(t.shape[0], dtype=np.int64)
    u = list(unseen_ids)
    for i, cid in enumerate(u):
        perm[cid] = u[(i + 1) % len(u)]
    return tz.take0(t, perm)


def evaluate(model: Model, cfg: ExperimentConfig | None = None,
             shuffle_unseen: bool = False):
    """Scores cfg.n_eval fresh images over all classes. Returns
    (metrics dict, confusion matrix)."""
    cfg = model.cfg if cfg is None else cfg
    all_ids = model.all_class_ids()
    split = synth_split(cfg, "eval", list(range(N_OBJECT_CLASSES)), cfg.n_eval,
                        round_robin=True)
    t = class_text(model, None)
    if shuffle_unseen:
        t = _shuffled_rows(t, model.unseen_ids)

    n_cls = len(all_ids)
    conf = np.zeros((n_cls, n_cls), dtype=np.int64)
    for start in range(0, cfg.n_eval, cfg.batch_size):
        tokens = split.tokens[start:start + cfg.batch_size]
        logits = batch_logits(model, tokens, t)
        for off, s in enumerate(logits):
            pred = np.argmax(s.data, axis=0).astype(np.uint8)
            i = start + off
            if cfg.eval_upsample:
                up = upsample_patch_predictions(pred, cfg.patch_size)
                conf += confusion_matrix(split.pixel_labels[i], up, n_cls)
            else:
                conf += confusion_matrix(split.patch_labels[i], pred, n_cls)
    return gzs3_metrics(conf, model.seen_ids, model.unseen_ids), conf


def cross_attention_maps(model: Model, tokens_one: np.ndarray, t: Tensor,
                         block: int = -1):
    """Head-averaged cross-attention of one decoder block (default the last)
    for one image, as one (g, g) map per class."""
    capture: list = []
    logits = batch_logits(model, tokens_one[None], t, capture=capture)
    if not -len(capture) <= block < len(capture):
        raise IndexError(f"block index {block} outside 0..{len(capture) - 1}")
    weights = capture[block]
    if model.cfg.decoder == "pixel-query":
        w = weights.mean(axis=0)          # (pixels, classes)
        per_class = w.T
    else:
        per_class = weights.mean(axis=0)  # (classes, pixels)
    g = model.cfg.grid
    return per_class.reshape(per_class.shape[0], g, g), logits[0]
