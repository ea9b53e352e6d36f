"""Experiment configuration: a flat key=value file with strict parsing.

Lines are ``key = value``; blank lines and '#' comments are skipped; inline
trailing comments are not supported (an '=' value keeps everything after the
first '='). Unknown keys and malformed values are rejected with their line
number. Every key has a default, so the empty string parses to the default
experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from . import vocab as zv
from .dataset import N_OBJECT_CLASSES, split_class_ids

PROMPT_INITS = ("pretrain", "random")
PROMPT_MODES = ("vision-language", "vision-only", "language-only")
DECODERS = ("pixel-query", "class-query")
ATTENTIONS = ("local", "global")

# one help line per key; the parser and README table are generated from this
KEY_DOCS = {
    "seed": "master seed; every random stream derives from it",
    "embed_dim": "shared embedding width of both encoders and the decoder",
    "encoder_layers": "depth of each frozen encoder",
    "encoder_heads": "attention heads inside the frozen encoders",
    "image_size": "square image side in pixels",
    "patch_size": "square patch side; image_size must divide by it",
    "decoder_blocks": "number of decoder refinement blocks",
    "decoder_heads": "attention heads inside the decoder",
    "window_size": "window side (in patches) for routed window attention",
    "selected_windows": "how many windows each window may attend into",
    "attention": "decoder spatial attention: 'local' routing or 'global' "
                 "(the same kernel with every window selected)",
    "mlp_ratio": "hidden width multiplier of every MLP",
    "vision_prompt_len": "learnable prompt tokens per vision encoder layer",
    "text_prompt_len": "learnable text prompt tokens; also selects the "
                       "matching template sentence (4, 5, or 6)",
    "prompt_init": "text prompt start point: 'pretrain' copies the frozen "
                   "encoder's template states, 'random' draws noise",
    "prompt_mode": "which prompt banks train: 'vision-language', "
                   "'vision-only' (text bank frozen), or 'language-only' "
                   "(no vision prompts)",
    "decoder": "'pixel-query' refines pixels against class text; "
               "'class-query' refines class queries against frozen pixels",
    "decoder_taps": "comma list of encoder layer indices feeding the blocks; "
                    "empty means the last decoder_blocks layers",
    "lr0": "peak learning rate of the polynomial schedule",
    "poly_power": "polynomial decay exponent",
    "iterations": "training iterations",
    "batch_size": "images per iteration",
    "weight_decay": "decoupled weight decay",
    "beta1": "first-moment decay",
    "beta2": "second-moment decay",
    "adam_eps": "optimizer epsilon",
    "focal_weight": "weight of the focal term",
    "dice_weight": "weight of the dice term",
    "focal_gamma": "focal focusing exponent",
    "dice_smooth": "dice smoothing constant",
    "n_train": "training images (synthesized once, then sampled)",
    "n_eval": "evaluation images",
    "min_objects": "fewest objects per image",
    "max_objects": "most objects per image",
    "unseen": "comma list of held-out class names, never shown in training",
    "normalize_text": "L2-normalize text embedding rows",
    "eval_upsample": "score at pixel level (nearest-neighbor upsampling) "
                     "instead of patch level",
    "out_dir": "where run artifacts are written",
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    embed_dim: int = 32
    encoder_layers: int = 4
    encoder_heads: int = 4
    image_size: int = 64
    patch_size: int = 4
    decoder_blocks: int = 2
    decoder_heads: int = 4
    window_size: int = 4
    selected_windows: int = 4
    attention: str = "local"
    mlp_ratio: int = 4
    vision_prompt_len: int = 8
    text_prompt_len: int = 6
    prompt_init: str = "pretrain"
    prompt_mode: str = "vision-language"
    decoder: str = "pixel-query"
    decoder_taps: tuple = ()
    lr0: float = 2e-4
    poly_power: float = 0.9
    iterations: int = 2000
    batch_size: int = 4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    focal_weight: float = 100.0
    dice_weight: float = 1.0
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0
    n_train: int = 96
    n_eval: int = 96
    min_objects: int = 1
    max_objects: int = 3
    unseen: tuple = ("square green", "disc blue", "triangle yellow", "cross red")
    normalize_text: bool = True
    eval_upsample: bool = False
    out_dir: str = "runs"

    # ------------------------------------------------------------------
    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def total_windows(self) -> int:
        return (self.grid // self.window_size) ** 2

    def routing_selected(self) -> int:
        """'global' attention is routing with every window selected."""
        return self.total_windows if self.attention == "global" else self.selected_windows

    def taps(self) -> list[int]:
        if self.decoder_taps:
            return list(self.decoder_taps)
        start = self.encoder_layers - self.decoder_blocks
        return list(range(start, self.encoder_layers))

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ValueError(f"config: {msg}")

        need(self.embed_dim > 0 and self.embed_dim % self.encoder_heads == 0,
             "embed_dim must divide by encoder_heads")
        need(self.embed_dim % self.decoder_heads == 0,
             "embed_dim must divide by decoder_heads")
        need(self.encoder_layers >= 1, "encoder_layers must be positive")
        need(self.image_size % self.patch_size == 0,
             "image_size must be a multiple of patch_size")
        need(self.grid % self.window_size == 0,
             "patch grid must be a multiple of window_size")
        need(self.decoder_blocks >= 1, "decoder_blocks must be positive")
        need(1 <= self.selected_windows <= self.total_windows,
             f"selected_windows must lie in [1, {self.total_windows}]")
        need(self.attention in ATTENTIONS, f"attention must be one of {ATTENTIONS}")
        need(self.prompt_init in PROMPT_INITS,
             f"prompt_init must be one of {PROMPT_INITS}")
        need(self.prompt_mode in PROMPT_MODES,
             f"prompt_mode must be one of {PROMPT_MODES}")
        need(self.decoder in DECODERS, f"decoder must be one of {DECODERS}")
        need(self.text_prompt_len in zv.TEMPLATES,
             f"text_prompt_len must be one of {sorted(zv.TEMPLATES)}")
        need(self.vision_prompt_len >= 1, "vision_prompt_len must be positive")
        taps = self.taps()
        need(len(taps) == self.decoder_blocks,
             "decoder_taps must list one encoder layer per decoder block")
        need(all(0 <= t < self.encoder_layers for t in taps),
             "decoder_taps entries must be valid encoder layer indices")
        need(self.iterations > 0, "iterations must be positive")
        need(self.batch_size > 0, "batch_size must be positive")
        need(self.lr0 > 0, "lr0 must be positive")
        need(self.n_train > 0 and self.n_eval > 0, "dataset sizes must be positive")
        need(1 <= self.min_objects <= self.max_objects,
             "need 1 <= min_objects <= max_objects")
        need(self.mlp_ratio >= 1, "mlp_ratio must be positive")
        # raises ValueError itself on unknown or duplicate names
        split_class_ids(list(self.unseen))
        need(len(self.unseen) < N_OBJECT_CLASSES, "cannot hold out every class")
        # text sequences must fit the frozen encoder's position table
        need(self.text_prompt_len + 3 <= 16, "text sequence exceeds position table")


_BOOL_WORDS = {"true": True, "yes": True, "1": True,
               "false": False, "no": False, "0": False}


def _parse_value(name: str, kind, raw: str):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() not in _BOOL_WORDS:
            raise ValueError(f"{name} expects true/false, got {raw!r}")
        return _BOOL_WORDS[raw.lower()]
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    if kind is tuple:
        if not raw:
            return ()
        parts = [p.strip() for p in raw.split(",")]
        if name == "decoder_taps":
            return tuple(int(p) for p in parts)
        return tuple(parts)
    raise ValueError(f"unhandled config type for {name}")


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse key = value lines into a config. With ``base``, keys present in
    the text override that config's fields and everything else carries over;
    without it, omitted keys take the dataclass defaults."""
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    # dataclass field types arrive as strings under future annotations
    real = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected key = value")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in kinds:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        kind = kinds[key]
        kind = real[kind] if isinstance(kind, str) else kind
        try:
            values[key] = _parse_value(key, kind, raw)
        except ValueError as e:
            raise ValueError(f"line {lineno}: {e}") from None
    if base is None:
        cfg = ExperimentConfig(**values)
    else:
        cfg = replace(base, **values)
    cfg.validate()
    return cfg


def read_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), base)


def format_config(cfg: ExperimentConfig) -> str:
    """Canonical text form: every key explicit, field order, round-trips
    through parse_config_text to an equal config."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def default_config_text() -> str:
    """The documented default file: a comment block per key."""
    cfg = ExperimentConfig()
    lines = ["# experiment configuration (defaults shown)"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"# {KEY_DOCS[f.name]}")
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
