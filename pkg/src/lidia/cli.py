"""Command-line interface: denoise, train, adapt-external, adapt-internal, eval, selftest.

Settings resolve as built-in defaults < ``--config`` JSON file < flags.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .image_io import ImageFormatError, as_plane, load_image, psnr, save_image
from .model_io import ModelFormatError, load_model, save_model
from .network import ArchDescriptor, init_params
from .patches import PatchConfigError
from .training import (
    AdaptConfig,
    TrainConfig,
    adapt_external,
    adapt_internal,
    csv_text,
    evaluate,
    load_dataset,
    train_universal,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".pgm", ".ppm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# name -> (type, default, help).  list types take one or more values.
COMMON = {
    "seed": (int, 0, "seed for every random draw"),
    "threads": (int, 1, "worker threads for patch search and inference (results do not depend on it)"),
}
ARCH = {
    "variant": (str, "LIDIA", "LIDIA or LIDIA-S"),
    "color": (bool, False, "colour model (5x5x3 patches, 80 features)"),
    "patch_side": (int, None, "patch side; default 7 gray, 5 colour"),
    "k": (int, 14, "group size (seed patch + k-1 neighbours)"),
    "features": (int, None, "feature dimension; default 64 gray, 80 colour"),
    "window": (int, 37, "search window side b"),
    "share_weight_net": (bool, False, "one weight net for both scales"),
}
ADAPT = {
    "model": (str, None, "input model file (required)"),
    "sigma": (float, 25.0, "noise std on the 8-bit scale"),
    "epochs": (int, 5, "adaptation epochs"),
    "lr": (float, 1e-3, "Adam learning rate"),
    "crop_size": (int, 32, "training crop side"),
    "batch_images": (int, 1, "crops per step"),
    "model_out": (str, None, "write the adapted model here"),
    "reference": (str, None, "clean image; logs PSNR after every epoch"),
    "log": (str, None, "CSV loss/PSNR log"),
}
COMMANDS = {
    "denoise": {
        "input": (str, None, "noisy PGM/PPM image (required)"),
        "output": (str, None, "denoised image path (required)"),
        "model": (str, None, "model file (required)"),
        "reference": (str, None, "clean image; prints PSNR"),
        **COMMON,
    },
    "train": {
        "train": (list, None, "training images or folders (required)"),
        "val": (list, None, "validation images or folders"),
        "model_out": (str, None, "output model file (required)"),
        "log": (str, None, "CSV loss/PSNR log"),
        **ARCH,
        "epochs": (int, 100, "training epochs"),
        "batch_images": (int, 4, "crops per step, from distinct images"),
        "crop_size": (int, 64, "training crop side"),
        "sigma": (float, 25.0, "noise std on the 8-bit scale"),
        "blind": (bool, False, "draw sigma uniformly from [sigma_min, sigma_max] per crop"),
        "sigma_min": (float, 10.0, "blind training lower sigma"),
        "sigma_max": (float, 30.0, "blind training upper sigma"),
        "adam_lr": (float, 1e-2, "Adam learning rate"),
        "sgd_lr": (float, 1e-3, "SGD learning rate after the switch"),
        "sgd_momentum": (float, 0.9, "SGD momentum"),
        "switch_fraction": (float, 0.8, "fraction of epochs trained with Adam"),
        "checkpoint_every": (int, 0, "save a checkpoint every N epochs (0: never)"),
        **COMMON,
    },
    "adapt-external": {
        **ADAPT,
        "related": (list, None, "clean related images (required)"),
        "input": (str, None, "noisy image to denoise with the adapted model"),
        "output": (str, None, "denoised output; requires an input image"),
        **COMMON,
    },
    "adapt-internal": {
        **ADAPT,
        "input": (str, None, "noisy image (required)"),
        "output": (str, None, "denoised output after adaptation (required)"),
        **COMMON,
    },
    "eval": {
        "model": (str, None, "model file (required)"),
        "images": (list, None, "clean images or folders (required)"),
        "sigma": (float, 25.0, "noise std on the 8-bit scale"),
        "csv": (str, None, "write the PSNR table here"),
        "timing": (bool, False, "add a runtime column (makes the CSV run-dependent)"),
        **COMMON,
    },
    "selftest": {},
}
REQUIRED = {
    "denoise": ("input", "output", "model"),
    "train": ("train", "model_out"),
    "adapt-external": ("model", "related", "model_out"),
    "adapt-internal": ("model", "input", "output"),
    "eval": ("model", "images"),
    "selftest": (),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lidia", description="Lightweight learned non-local image denoising.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for cmd, opts in COMMANDS.items():
        p = sub.add_parser(cmd, help=f"{cmd} subcommand")
        if opts:
            p.add_argument("--config", help="JSON file with settings; flags override it (default: None)", default=None)
        for name, (typ, default, text) in opts.items():
            flag = "--" + name.replace("_", "-")
            help_text = f"{text} (default: {default})"
            if typ is bool:
                p.add_argument(flag, dest=name, action="store_true", default=argparse.SUPPRESS, help=help_text)
            elif typ is list:
                p.add_argument(flag, dest=name, nargs="+", default=argparse.SUPPRESS, help=help_text)
            else:
                p.add_argument(flag, dest=name, type=typ, default=argparse.SUPPRESS, help=help_text)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the JSON overlay and explicit flags; reject unknown or ill-typed keys."""
    opts = COMMANDS[command]
    cfg = {name: default for name, (_, default, _) in opts.items()}
    path = getattr(args, "config", None)
    if path:
        try:
            overlay = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise UsageError(f"cannot read config {path}: {err}") from err
        if not isinstance(overlay, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(overlay) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for key, value in overlay.items():
            cfg[key] = _coerce(key, value, opts[key][0])
    for name in opts:
        if hasattr(args, name):
            cfg[name] = getattr(args, name)
    missing = [m for m in REQUIRED[command] if cfg.get(m) in (None, [])]
    if missing:
        raise UsageError(f"missing required settings: {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


def _coerce(key, value, typ):
    if typ is list:
        value = [value] if isinstance(value, str) else value
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise UsageError(f"config key {key!r} must be a list of paths")
        return value
    if typ is bool:
        if not isinstance(value, bool):
            raise UsageError(f"config key {key!r} must be true/false")
        return value
    if value is None:
        return None
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if typ is str and isinstance(value, str):
        return value
    raise UsageError(f"config key {key!r} must be of type {typ.__name__}")


def expand_images(paths) -> list[str]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out += sorted(str(q) for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
        else:
            out.append(str(p))
    return out


def _write_text_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_text(text)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _echo(rec):
    val = "" if rec.val_psnr is None else f" val_psnr {rec.val_psnr:.4f}"
    print(f"epoch {rec.epoch} step {rec.step} loss {rec.loss:.6e}{val}", flush=True)


def _config_comment(cfg: dict) -> dict:
    return {k: json.dumps(v) for k, v in cfg.items()}


# ----------------------------------------------------------------- commands


def cmd_denoise(cfg):
    model = load_model(cfg["model"])
    noisy = load_image(cfg["input"])
    reference = load_image(cfg["reference"]) if cfg["reference"] else None
    res = model.denoise(noisy, reference=reference, threads=cfg["threads"])
    save_image(res.image, cfg["output"])
    if res.psnr is not None:
        print(f"PSNR {res.psnr:.12f}")
    return EXIT_OK


def cmd_train(cfg):
    desc = ArchDescriptor(
        variant=cfg["variant"], color=cfg["color"], patch_side=cfg["patch_side"], k=cfg["k"],
        feature_dim=cfg["features"], window=cfg["window"], share_weight_net=cfg["share_weight_net"],
    )
    tcfg = TrainConfig(
        epochs=cfg["epochs"], batch_images=cfg["batch_images"], crop_size=cfg["crop_size"], sigma=cfg["sigma"],
        sigma_range=(cfg["sigma_min"], cfg["sigma_max"]) if cfg["blind"] else None,
        adam_lr=cfg["adam_lr"], sgd_lr=cfg["sgd_lr"], sgd_momentum=cfg["sgd_momentum"],
        switch_fraction=cfg["switch_fraction"], seed=cfg["seed"], checkpoint_every=cfg["checkpoint_every"],
        checkpoint_path=cfg["model_out"] if cfg["checkpoint_every"] else None, threads=cfg["threads"],
    )
    images = load_dataset(expand_images(cfg["train"]))
    val = load_dataset(expand_images(cfg["val"])) if cfg["val"] else None
    model = init_params(desc, cfg["seed"])
    res = train_universal(model, images, tcfg, val_images=val, on_epoch=_echo)
    save_model(res.model, cfg["model_out"])
    if cfg["log"]:
        _write_text_atomic(cfg["log"], csv_text(res.history, _config_comment(cfg)))
    return EXIT_OK


def _adapt_config(cfg, mode, related=()):
    return AdaptConfig(
        mode=mode, epochs=cfg["epochs"], sigma=cfg["sigma"], related_paths=tuple(related), learning_rate=cfg["lr"],
        seed=cfg["seed"], crop_size=cfg["crop_size"], batch_images=cfg["batch_images"], threads=cfg["threads"],
    )


def cmd_adapt_external(cfg):
    if cfg["output"] and not cfg["input"]:
        raise UsageError("--output needs --input")
    related = expand_images(cfg["related"])
    acfg = _adapt_config(cfg, "external", related)
    model = load_model(cfg["model"])
    images = load_dataset(related)
    noisy = load_image(cfg["input"]) if cfg["input"] else None
    reference = load_image(cfg["reference"]) if cfg["reference"] else None
    res = adapt_external(model, images, acfg, noisy=noisy, reference=reference, on_epoch=_echo)
    outputs = {}
    if noisy is not None and cfg["output"]:
        outputs["image"] = res.model.denoise(noisy, threads=cfg["threads"]).image
    save_model(res.model, cfg["model_out"])
    if "image" in outputs:
        save_image(outputs["image"], cfg["output"])
        if reference is not None:
            print(f"PSNR {psnr(outputs['image'], reference):.12f}")
    if cfg["log"]:
        _write_text_atomic(cfg["log"], csv_text(res.history, _config_comment(cfg)))
    return EXIT_OK


def cmd_adapt_internal(cfg):
    model = load_model(cfg["model"])
    noisy = load_image(cfg["input"])
    reference = load_image(cfg["reference"]) if cfg["reference"] else None
    res = adapt_internal(model, noisy, _adapt_config(cfg, "internal"), reference=reference, on_epoch=_echo)
    save_image(res.image, cfg["output"])
    if cfg["model_out"]:
        save_model(res.model, cfg["model_out"])
    if reference is not None:
        print(f"PSNR universal {psnr(res.universal, reference):.12f} adapted {psnr(res.image, reference):.12f}")
    if cfg["log"]:
        _write_text_atomic(cfg["log"], csv_text(res.history, _config_comment(cfg)))
    return EXIT_OK


def cmd_eval(cfg):
    model = load_model(cfg["model"])
    report = evaluate(model, expand_images(cfg["images"]), cfg["sigma"], cfg["seed"], threads=cfg["threads"])
    text = report.to_csv(timing=cfg["timing"], config=_config_comment(cfg))
    if cfg["csv"]:
        _write_text_atomic(cfg["csv"], text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_selftest(cfg):
    from .selftest import run_selftest

    report = run_selftest(stream=sys.stdout)
    return EXIT_OK if report.passed else EXIT_NUMERIC


HANDLERS = {
    "denoise": cmd_denoise,
    "train": cmd_train,
    "adapt-external": cmd_adapt_external,
    "adapt-internal": cmd_adapt_internal,
    "eval": cmd_eval,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return EXIT_USAGE
        cfg = resolve(args.command, args)
        return HANDLERS[args.command](cfg)
    except UsageError as err:
        print(f"lidia: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as err:
        print(f"lidia: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImageFormatError, ModelFormatError, PatchConfigError, OSError) as err:
        print(f"lidia: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as err:
        print(f"lidia: invalid configuration: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
