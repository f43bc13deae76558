"""Command-line front end: train / eval / summary / inspect / gen-data.

Exit codes follow POSIX convention: 0 success, 2 missing or unreadable
files, 64 usage errors (unknown flags, bad values, missing required flags).
Results go to stdout, diagnostics to stderr.

Every command accepts ``--config FILE`` with ``key=value`` lines (keys are
the flag names); explicit flags override config entries, which override
built-in defaults.
"""

from __future__ import annotations

import argparse
import os
import sys

from .data import Dataset, gen_salient_dataset
from .errors import ConfigurationError, ContractError
from .model import Model, SCALE_MODES, VARIANTS, build_variant, count_flops, count_params
from .reallocation import GUIDANCE_SOURCES
from .serial import FormatError, load_checkpoint, load_dataset, save_dataset, write_pgm
from .tensor import Tensor, no_grad
from .training import TrainConfig, evaluate, model_from_checkpoint, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(64)


def _build_parser() -> _Parser:
    parser = _Parser(prog="guideformer",
                     description="Train, evaluate, and inspect the backbone on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None,
                       help="key=value file supplying defaults for this command's flags")

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--out", default=None, help="output dataset path")
    p.add_argument("--size", type=int, default=None, help="image side length (default 64)")
    p.add_argument("--classes", type=int, default=None, help="number of classes (default 10)")

    p = sub.add_parser("train", help="train a variant on a dataset file")
    common(p)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--data", default=None, help="training dataset path")
    p.add_argument("--out", default=None, help="output directory for checkpoints and history")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--wd", type=float, default=None, help="weight decay (default 0.05)")
    p.add_argument("--warmup", type=int, default=None, help="warmup epochs (default 2)")
    p.add_argument("--guidance", choices=GUIDANCE_SOURCES, default=None)
    p.add_argument("--scale-mode", choices=SCALE_MODES, default=None)
    p.add_argument("--drop-path", type=float, default=None)
    p.add_argument("--leff", choices=("on", "off"), default=None,
                   help="depthwise conv inside the MLP (default on)")
    p.add_argument("--precision", choices=("f32", "f64"), default=None)
    p.add_argument("--val-frac", type=float, default=None,
                   help="trailing fraction of the data held out for validation (default 1/16)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="report accuracy of a checkpoint on a dataset")
    common(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", default=None)

    p = sub.add_parser("summary", help="report parameter and FLOP counts for a variant")
    common(p)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--input", type=int, default=None, help="input side length (default: variant's)")

    p = sub.add_parser("inspect", help="write significance maps for one image as PGM files")
    common(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--index", type=int, default=None, help="image index (default 0)")
    p.add_argument("--out", default=None, help="output directory for PGM files")
    return parser


_DEFAULTS = {
    "gen-data": {"size": 64, "classes": 10},
    "train": {"epochs": 20, "batch": 32, "lr": 1e-3, "wd": 0.05, "warmup": 2,
              "guidance": "hybrid", "scale_mode": "hybrid", "drop_path": 0.1,
              "leff": "on", "precision": "f32", "val_frac": 1.0 / 16.0},
    "eval": {},
    "summary": {},
    "inspect": {"index": 0},
}

_REQUIRED = {
    "gen-data": ("seed", "count", "out"),
    "train": ("variant", "data", "out", "seed"),
    "eval": ("ckpt", "data"),
    "summary": ("variant",),
    "inspect": ("ckpt", "data", "out"),
}

_CONVERT = {
    "seed": int, "count": int, "size": int, "classes": int, "epochs": int,
    "batch": int, "warmup": int, "index": int, "input": int,
    "lr": float, "wd": float, "drop_path": float, "val_frac": float,
}


def _read_config(path) -> dict[str, str]:
    entries = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            entries[key.strip().replace("-", "_")] = value.strip()
    return entries


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from --config entries, then built-in defaults."""
    cmd = args.command
    overlay = _read_config(args.config) if args.config else {}
    known = {k for k in vars(args) if k not in ("command", "config")}
    for key in overlay:
        if key not in known:
            raise UsageError(f"config key {key!r} is not a flag of {cmd!r}")
    for key in known:
        if getattr(args, key) is not None:
            continue
        if key in overlay:
            try:
                value = _CONVERT.get(key, str)(overlay[key])
            except ValueError:
                raise UsageError(f"config value for {key!r} is not valid: {overlay[key]!r}")
            setattr(args, key, value)
        elif key in _DEFAULTS[cmd]:
            setattr(args, key, _DEFAULTS[cmd][key])
    missing = [k for k in _REQUIRED[cmd] if getattr(args, k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"{cmd}: missing required flags: {flags}")
    return args


def _cmd_gen_data(args) -> int:
    dataset = gen_salient_dataset(args.seed, args.count, classes=args.classes, size=args.size)
    save_dataset(args.out, dataset)
    print(f"wrote {args.out} count={args.count} size={args.size} classes={args.classes}")
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    n = len(dataset)
    classes = int(dataset.labels.max()) + 1
    held = int(n * args.val_frac)
    if not 0 <= held < n:
        raise UsageError(f"--val-frac {args.val_frac} leaves no training data")
    train_ds = Dataset(images=dataset.images[: n - held], labels=dataset.labels[: n - held])
    val_ds = None
    if held:
        val_ds = Dataset(images=dataset.images[n - held :], labels=dataset.labels[n - held :])
    config = build_variant(args.variant, num_classes=classes, guidance=args.guidance,
                           scale_mode=args.scale_mode, drop_path=args.drop_path,
                           leff=args.leff == "on")
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                      weight_decay=args.wd, warmup_epochs=args.warmup,
                      seed=args.seed, precision=args.precision)
    model = Model(config, seed=args.seed, dtype=cfg.dtype)
    history = train(model, train_ds, cfg, val_dataset=val_ds, out_dir=args.out,
                    resume_from=args.resume, log=lambda s: print(s, file=sys.stderr))
    last = history[-1]
    print(f"trained epochs={cfg.epochs} loss={last[1]:.6f} train_acc={last[2]:.6f} "
          f"val_acc={last[3]:.6f} out={args.out}")
    return 0


def _cmd_eval(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    dataset = load_dataset(args.data)
    print(f"accuracy={evaluate(model, dataset)}")
    return 0


def _cmd_summary(args) -> int:
    config = build_variant(args.variant)
    model = Model(config, seed=0)
    print(f"params={count_params(model)} flops={count_flops(config, args.input)}")
    return 0


def _cmd_inspect(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    dataset = load_dataset(args.data)
    if not 0 <= args.index < len(dataset):
        raise UsageError(f"--index {args.index} outside dataset of {len(dataset)} images")
    os.makedirs(args.out, exist_ok=True)
    dtype = model.parameters()[0].dtype
    image = dataset.images[args.index : args.index + 1].astype(dtype)
    with no_grad():
        _, stage_maps = model(Tensor(image))
    write_pgm(os.path.join(args.out, "input.pgm"), image[0, :, :, 0])
    for i, maps in enumerate(stage_maps, start=1):
        write_pgm(os.path.join(args.out, f"stage{i}.pgm"), maps[0])
    print(f"wrote {len(stage_maps) + 1} maps to {args.out}")
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "summary": _cmd_summary,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        args = _resolve(args)
        return _HANDLERS[args.command](args)
    except (UsageError, ConfigurationError) as err:
        # bad flag/config values are usage errors in the POSIX sense
        print(f"guideformer {args.command}: {err}", file=sys.stderr)
        return 64
    except FileNotFoundError as err:
        print(f"guideformer {args.command}: file not found: {err.filename}", file=sys.stderr)
        return 2
    except (OSError, FormatError, ContractError) as err:
        print(f"guideformer {args.command}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
