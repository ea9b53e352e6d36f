"""Experiment driver.

Commands: train, eval, ablate, gradcheck, dump-attn, gen-data. Every
artifact lands in the directory named by --out (default: the config's
out_dir). The environment variable LDVC_SEED, when set, overrides the
config seed for any command that builds a model or a dataset.

Exit codes: 0 success, 2 configuration or argument error, 3 numeric
failure (non-finite values, failed gradient check), 4 file I/O or format
error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import ExperimentConfig, format_config, parse_config_text, read_config
from .dataset import N_OBJECT_CLASSES, split_class_ids, write_dataset
from .gradcheck import run_gradient_checks
from .metrics import iou_per_class
from .pipeline import (build_model, class_text, cross_attention_maps,
                       evaluate, synth_split, train)
from .tensor import NumericError, TapeError
from . import vocab as zv

METRIC_HEADER = "pAcc,mIoU_S,mIoU_U,hIoU"

# ablation axes: CLI name -> (config key, values for a given base config)
_AXES = {
    "attention": ("attention", lambda cfg: ["local", "global"]),
    "prompt-mode": ("prompt_mode", lambda cfg: ["language-only", "vision-only",
                                                "vision-language"]),
    "blocks": ("decoder_blocks", lambda cfg: [2, 3, 4]),
    "topk": ("selected_windows",
             lambda cfg: sorted({1, cfg.total_windows // 4, cfg.total_windows})),
    "init": ("prompt_init", lambda cfg: ["random", "pretrain"]),
    "decoder": ("decoder", lambda cfg: ["pixel-query", "class-query"]),
    "prompt-len": ("text_prompt_len", lambda cfg: [4, 5, 6]),
}


class _Exit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _env_seed(cfg: ExperimentConfig) -> ExperimentConfig:
    raw = os.environ.get("LDVC_SEED")
    if raw is None:
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise _Exit(2, f"LDVC_SEED must be an integer, got {raw!r}") from None
    return replace(cfg, seed=seed)


def _load_config(path: str) -> ExperimentConfig:
    try:
        cfg = read_config(path)
    except OSError as e:
        raise _Exit(4, f"cannot read config {path}: {e}") from None
    except ValueError as e:
        raise _Exit(2, f"{path}: {e}") from None
    return _env_seed(cfg)


def _load_checkpoint_config(path: str) -> ExperimentConfig:
    try:
        cfg_text, _ = read_checkpoint(path)
    except OSError as e:
        raise _Exit(4, f"cannot read checkpoint {path}: {e}") from None
    except ValueError as e:
        raise _Exit(4, str(e)) from None
    try:
        return parse_config_text(cfg_text)
    except ValueError as e:
        raise _Exit(4, f"checkpoint {path}: bad stored config: {e}") from None


def _restore_model(path: str, cfg: ExperimentConfig):
    model = build_model(cfg)
    try:
        load_checkpoint(path, model.named_trainables())
    except OSError as e:
        raise _Exit(4, f"cannot read checkpoint {path}: {e}") from None
    except ValueError as e:
        raise _Exit(4, f"checkpoint {path}: {e}") from None
    return model


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out if args.out else cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise _Exit(4, f"cannot create output directory {out}: {e}") from None
    return out


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise _Exit(4, f"cannot write {path}: {e}") from None


def _loss_csv(trace) -> str:
    lines = ["iteration,total,focal,dice"]
    for i, (total, focal, dice) in enumerate(trace, start=1):
        lines.append(f"{i},{total!r},{focal!r},{dice!r}")
    return "\n".join(lines) + "\n"


def _metrics_csv(metrics: dict) -> str:
    row = ",".join(repr(float(metrics[k])) for k in METRIC_HEADER.split(","))
    return f"{METRIC_HEADER}\n{row}\n"


def _check_finite(trace) -> None:
    for i, row in enumerate(trace, start=1):
        if not all(math.isfinite(v) for v in row):
            raise _Exit(3, f"non-finite loss at iteration {i}: {row}")


def _progress(label: str, total_iters: int):
    def cb(it: int, row):
        if (it + 1) % 200 == 0 or it + 1 == total_iters:
            print(f"{label} iter {it + 1}/{total_iters} loss {row[0]:.4f}",
                  file=sys.stderr, flush=True)
    return cb


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args, cfg)
    model, trace = train(cfg, progress=_progress("train", cfg.iterations))
    _check_finite(trace)
    _write_text(out / "loss.csv", _loss_csv(trace))
    _write_text(out / "config.txt", format_config(cfg))
    try:
        save_checkpoint(out / "model.ckpt", format_config(cfg),
                        model.named_trainables())
    except OSError as e:
        raise _Exit(4, f"cannot write checkpoint: {e}") from None
    print(f"trained {cfg.iterations} iterations, final loss {trace[-1][0]:.4f}")
    print(f"wrote {out / 'model.ckpt'}, {out / 'loss.csv'}, {out / 'config.txt'}")
    return 0


def _role(model, cid: int) -> str:
    if cid in model.unseen_ids:
        return "unseen"
    return "background" if cid == N_OBJECT_CLASSES else "seen"


def cmd_eval(args) -> int:
    cfg = _load_checkpoint_config(args.ckpt)
    if args.config:
        try:
            cfg = read_config(args.config, base=cfg)
        except OSError as e:
            raise _Exit(4, f"cannot read config {args.config}: {e}") from None
        except ValueError as e:
            raise _Exit(2, f"config {args.config}: {e}") from None
    cfg = _env_seed(cfg)
    model = _restore_model(args.ckpt, cfg)
    out = _out_dir(args, cfg)
    metrics, conf = evaluate(model, cfg, shuffle_unseen=args.shuffle_unseen)
    _write_text(out / "metrics.csv", _metrics_csv(metrics))

    names = zv.class_names(include_background=True)
    iou = iou_per_class(conf)
    lines = ["class_id,name,role,iou"]
    for i, cid in enumerate(model.all_class_ids()):
        lines.append(f"{cid},{names[cid]},{_role(model, cid)},{float(iou[i])!r}")
    _write_text(out / "per_class_iou.csv", "\n".join(lines) + "\n")

    print(METRIC_HEADER)
    print(",".join(f"{metrics[k]:.4f}" for k in METRIC_HEADER.split(",")))
    print(f"wrote {out / 'metrics.csv'}, {out / 'per_class_iou.csv'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    if args.axis not in _AXES:
        raise _Exit(2, f"unknown ablation axis {args.axis!r}; "
                       f"choose from {', '.join(sorted(_AXES))}")
    key, values = _AXES[args.axis]
    out = _out_dir(args, cfg)
    rows = []
    for value in values(cfg):
        run_cfg = replace(cfg, **{key: value})
        run_cfg.validate()
        model, trace = train(run_cfg,
                             progress=_progress(f"{args.axis}={value}",
                                                run_cfg.iterations))
        _check_finite(trace)
        metrics, _ = evaluate(model, run_cfg)
        _write_text(out / f"loss_{args.axis}_{value}.csv", _loss_csv(trace))
        rows.append((value, metrics, trace[-1][0]))
        print(f"{args.axis}={value}: " +
              " ".join(f"{k}={metrics[k]:.4f}" for k in METRIC_HEADER.split(",")))
    lines = [f"axis,value,{METRIC_HEADER},final_loss"]
    for value, metrics, final_loss in rows:
        vals = ",".join(repr(float(metrics[k])) for k in METRIC_HEADER.split(","))
        lines.append(f"{args.axis},{value},{vals},{final_loss!r}")
    _write_text(out / "ablation.csv", "\n".join(lines) + "\n")
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_checks(corrupt=args.corrupt)
    failed = 0
    for name, err, tol in results:
        ok = err < tol
        failed += not ok
        print(f"{name:28s} {err:11.3e}  tol {tol:.0e}  {'ok' if ok else 'FAIL'}")
    print(f"{len(results)} checks, {failed} failed")
    if failed:
        raise _Exit(3, "gradient check failed")
    return 0


def cmd_dump_attn(args) -> int:
    cfg = _env_seed(_load_checkpoint_config(args.ckpt))
    model = _restore_model(args.ckpt, cfg)
    if not 0 <= args.sample < cfg.n_eval:
        raise _Exit(2, f"sample index {args.sample} outside 0..{cfg.n_eval - 1}")
    if not 0 <= args.block < cfg.decoder_blocks:
        raise _Exit(2, f"block index {args.block} outside 0..{cfg.decoder_blocks - 1}")
    out = _out_dir(args, cfg)
    split = synth_split(cfg, "eval", list(range(N_OBJECT_CLASSES)), cfg.n_eval,
                        round_robin=True)
    t = class_text(model)
    maps, _ = cross_attention_maps(model, split.tokens[args.sample], t,
                                   block=args.block)
    names = zv.class_names(include_background=True)
    for cid in model.all_class_ids():
        m = maps[cid]
        lo, hi = float(m.min()), float(m.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        gray = np.round((m - lo) * scale).astype(np.uint8)
        path = out / f"attn_s{args.sample}_b{args.block}_c{cid:02d}.pgm"
        header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n"
        try:
            path.write_bytes(header.encode("ascii") + gray.tobytes())
        except OSError as e:
            raise _Exit(4, f"cannot write {path}: {e}") from None
    print(f"wrote {len(model.all_class_ids())} maps to {out} "
          f"(sample {args.sample}, block {args.block})")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    if args.split == "train":
        seen, _ = split_class_ids(list(cfg.unseen))
        classes, count, robin = seen, cfg.n_train, False
    else:
        classes, count, robin = list(range(N_OBJECT_CLASSES)), cfg.n_eval, True
    split = synth_split(cfg, args.split, classes, count, round_robin=robin)
    path = Path(args.out)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_dataset(path, split.images, split.pixel_labels, cfg.patch_size)
    except OSError as e:
        raise _Exit(4, f"cannot write {path}: {e}") from None
    print(f"wrote {count} {args.split} samples to {path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zeroseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", required=True, help="config file (key = value lines)")
    t.add_argument("--out", help="output directory (default: config out_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--config", help="config file overriding the stored one")
    e.add_argument("--shuffle-unseen", action="store_true",
                   help="shuffle unseen class embeddings (transfer baseline)")
    e.add_argument("--out", help="output directory (default: config out_dir)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate one setting per axis value")
    a.add_argument("--config", required=True, help="base config file")
    a.add_argument("--axis", required=True,
                   help="one of " + ", ".join(sorted(_AXES)))
    a.add_argument("--out", help="output directory (default: config out_dir)")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every kernel")
    g.add_argument("--corrupt", help="corrupt the named kernel (negative control)")
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dump-attn", help="write per-class cross-attention maps as PGM")
    d.add_argument("--ckpt", required=True, help="checkpoint file")
    d.add_argument("--sample", type=int, required=True, help="evaluation sample index")
    d.add_argument("--block", type=int, required=True, help="decoder block index")
    d.add_argument("--out", help="output directory (default: config out_dir)")
    d.set_defaults(func=cmd_dump_attn)

    n = sub.add_parser("gen-data", help="render a split and write it as one file")
    n.add_argument("--config", required=True, help="config file")
    n.add_argument("--split", choices=("train", "eval"), default="train")
    n.add_argument("--out", required=True, help="output dataset file")
    n.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Exit as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (NumericError, TapeError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
