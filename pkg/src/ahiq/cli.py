"""Command-line front end: train, eval, score a single pair, and export
learned-offset visualizations.

Configuration is flat ``key=value`` lines (dotted keys, ``#`` comments) merged
with command-line ``KEY=VALUE`` overrides; every key is validated against the
schema and unknown keys are errors.  Exit codes: 0 success, 1 runtime
failure, 2 configuration/schema/input-format errors.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from typing import Optional

import numpy as np

from .checkpoint import CheckpointFormatError
from .data import (
    CROP_SIZE,
    ImageFormatError,
    ManifestError,
    decode_image,
    load_manifest,
    normalize,
    split_by_reference,
    twenty_crop_score,
)
from .fusion import STRATEGIES
from .head import POOLING_MODES
from .metrics import DegenerateInputError
from .model import AHIQModel, ModelConfig, PRESETS, load_pretrained_backbones
from .tensor import Tensor, no_grad
from .train_eval import ManifestPairDataset, TrainConfig, TrainingError, evaluate, train


class ConfigError(ValueError):
    """Invalid, unknown, or missing configuration."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes"):
        return True
    if low in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip() != "")


# key -> (parser, default); None defaults mean "resolved later"
SCHEMA: dict[str, tuple] = {
    "model.preset": (str, "toy-b16"),
    "model.strategy": (str, None),
    "model.pooling": (str, None),
    "model.per_image_offsets": (_parse_bool, None),
    "model.patch_size": (int, None),
    "model.vit_depth": (int, None),
    "model.vit_width": (int, None),
    "model.vit_heads": (int, None),
    "model.vit_tapped": (_parse_int_tuple, None),
    "model.cnn_stem": (int, None),
    "model.cnn_mid": (int, None),
    "model.cnn_out": (int, None),
    "model.deform_kernel": (int, None),
    "model.mix_channels": (int, None),
    "model.head_hidden": (int, None),
    "data.labels": (str, None),
    "data.ref_dir": (str, None),
    "data.dist_dir": (str, None),
    "train.epochs": (int, 50),
    "train.batch_size": (int, 8),
    "train.lr": (float, 1e-4),
    "train.weight_decay": (float, 1e-5),
    "train.t_max": (int, 50),
    "train.val_every": (int, 1),
    "train.eval_crops": (int, 20),
    "pretrained": (str, None),
    "seed": (int, 0),
    "out": (str, None),
}


class RunConfig:
    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key: str):
        return self.values[key]

    def require(self, key: str):
        value = self.values.get(key)
        if value is None:
            raise ConfigError(f"missing required config key {key!r}")
        return value


def parse_config(path: Optional[str], overrides: list[str]) -> RunConfig:
    values = {key: default for key, (_, default) in SCHEMA.items()}
    items: list[tuple[str, str, str]] = []
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
                key, _, val = line.partition("=")
                items.append((key.strip(), val.strip(), f"{path}:{line_no}"))
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value")
        key, _, val = ov.partition("=")
        items.append((key.strip(), val.strip(), "command line"))
    for key, val, where in items:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r} ({where})")
        parser_fn = SCHEMA[key][0]
        try:
            values[key] = parser_fn(val)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r} ({where}): {exc}") from None
    return RunConfig(values)


def model_config_from(cfg: RunConfig) -> ModelConfig:
    preset = cfg["model.preset"]
    if preset not in PRESETS:
        raise ConfigError(f"unknown model.preset {preset!r} (choose from {sorted(PRESETS)})")
    base = PRESETS[preset]()
    vit_kw = {}
    for key, field in (
        ("model.patch_size", "patch_size"),
        ("model.vit_depth", "depth"),
        ("model.vit_width", "width"),
        ("model.vit_heads", "heads"),
        ("model.vit_tapped", "tapped_blocks"),
    ):
        if cfg[key] is not None:
            vit_kw[field] = cfg[key]
    cnn_kw = {}
    for key, field in (
        ("model.cnn_stem", "stem_channels"),
        ("model.cnn_mid", "mid_channels"),
        ("model.cnn_out", "out_channels"),
    ):
        if cfg[key] is not None:
            cnn_kw[field] = cfg[key]
    top_kw = {}
    for key, field in (
        ("model.strategy", "strategy"),
        ("model.pooling", "pooling"),
        ("model.per_image_offsets", "per_image_offsets"),
        ("model.deform_kernel", "deform_kernel"),
        ("model.mix_channels", "mix_channels"),
        ("model.head_hidden", "head_hidden"),
    ):
        if cfg[key] is not None:
            top_kw[field] = cfg[key]
    if "strategy" in top_kw and top_kw["strategy"] not in STRATEGIES:
        raise ConfigError(f"unknown strategy {top_kw['strategy']!r}")
    if "pooling" in top_kw and top_kw["pooling"] not in POOLING_MODES:
        raise ConfigError(f"unknown pooling {top_kw['pooling']!r}")
    try:
        return replace(
            base,
            vit=replace(base.vit, **vit_kw),
            cnn=replace(base.cnn, **cnn_kw),
            **top_kw,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config_from(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
        t_max=cfg["train.t_max"],
        val_every=cfg["train.val_every"],
        eval_crops=cfg["train.eval_crops"],
        seed=cfg["seed"],
    )


def _load_splits(cfg: RunConfig):
    manifest = load_manifest(
        cfg.require("data.labels"), cfg.require("data.ref_dir"), cfg.require("data.dist_dir")
    )
    return split_by_reference(manifest, cfg["seed"])


def cmd_train(cfg: RunConfig) -> int:
    out_dir = cfg.require("out")
    os.makedirs(out_dir, exist_ok=True)
    train_samples, val_samples, test_samples = _load_splits(cfg)
    model = AHIQModel(model_config_from(cfg), seed=cfg["seed"])
    if cfg["pretrained"] is not None:
        load_pretrained_backbones(model, cfg["pretrained"])
    tcfg = train_config_from(cfg)
    log_path = os.path.join(out_dir, "train.log")
    with open(log_path, "w", encoding="utf-8") as log_fh:
        result = train(
            model,
            ManifestPairDataset(train_samples),
            ManifestPairDataset(val_samples),
            tcfg,
            log_fn=lambda line: print(line, file=log_fh),
        )
    model.load_state(result.best_state)
    ckpt_path = os.path.join(out_dir, "best.ahiqw1")
    model.save(ckpt_path)
    report = evaluate(
        model,
        ManifestPairDataset(test_samples),
        np.random.default_rng(cfg["seed"] + 7919),
        crops=tcfg.eval_crops,
    )
    report.save(os.path.join(out_dir, "report.csv"))
    print(f"best_epoch={result.best_epoch} test_plcc={report.plcc:.6f} "
          f"test_srocc={report.srocc:.6f} test_main={report.main:.6f}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str, split: str) -> int:
    model = AHIQModel.from_checkpoint(checkpoint)
    parts = dict(zip(("train", "val", "test"), _load_splits(cfg)))
    if split == "all":
        samples = [s for part in parts.values() for s in part]
    elif split in parts:
        samples = parts[split]
    else:
        raise ConfigError(f"unknown split {split!r}")
    report = evaluate(
        model,
        ManifestPairDataset(samples),
        np.random.default_rng(cfg["seed"] + 7919),
        crops=cfg["train.eval_crops"],
    )
    if cfg["out"] is not None:
        os.makedirs(cfg["out"], exist_ok=True)
        report.save(os.path.join(cfg["out"], "report.csv"))
    else:
        sys.stdout.write(report.to_csv())
    return 0


def cmd_score(cfg: RunConfig, checkpoint: str, ref_path: str, dist_path: str) -> int:
    model = AHIQModel.from_checkpoint(checkpoint)
    ref = decode_image(ref_path)
    dist = decode_image(dist_path)
    score = twenty_crop_score(model, ref, dist, np.random.default_rng(cfg["seed"]))
    print(f"{score:.4f}")
    return 0


def _center_crop(image: np.ndarray, size: int = CROP_SIZE) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ConfigError(f"image {h}x{w} smaller than {size}x{size}")
    top = (h - size) // 2
    left = (w - size) // 2
    return image[top : top + size, left : left + size]


def write_ppm(path: str, gray: np.ndarray) -> None:
    """Binary P6 with r=g=b; expects uint8 (H, W)."""
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.repeat(gray[:, :, None], 3, axis=2).tobytes())


def cmd_export_offsets(cfg: RunConfig, checkpoint: str, ref_path: str, out_prefix: str) -> int:
    model = AHIQModel.from_checkpoint(checkpoint)
    if not model.fusion.cfg.uses_deform:
        raise ConfigError(
            f"checkpoint strategy {model.cfg.strategy!r} has no offset predictor"
        )
    ref = _center_crop(decode_image(ref_path))
    model.eval()
    with no_grad():
        vit_ref = model.vit.extract(Tensor(normalize(ref)[None]))
        field = model.fusion.predict_offsets(vit_ref).data[0]  # (2K^2, S, S)
    taps = field.shape[0] // 2
    extent = field.shape[1]
    with open(out_prefix + ".csv", "w", encoding="utf-8") as fh:
        for y in range(extent):
            for x in range(extent):
                for tap in range(taps):
                    dy = field[2 * tap, y, x]
                    dx = field[2 * tap + 1, y, x]
                    fh.write(f"{y},{x},{tap},{dy:.6f},{dx:.6f}\n")
    magnitude = np.sqrt(field[0::2] ** 2 + field[1::2] ** 2).mean(axis=0)
    peak = magnitude.max()
    if peak > 0:
        gray = np.round(magnitude / peak * 255).astype(np.uint8)
    else:
        gray = np.zeros_like(magnitude, dtype=np.uint8)
    write_ppm(out_prefix + ".ppm", gray)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ahiq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("overrides", nargs="*", metavar="KEY=VALUE")

    common(sub.add_parser("train", help="train a model and report on the test split"))

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    common(p_eval)

    p_score = sub.add_parser("score", help="score one reference/distorted pair")
    p_score.add_argument("--checkpoint", required=True)
    p_score.add_argument("--ref", required=True)
    p_score.add_argument("--dist", required=True)
    common(p_score)

    p_off = sub.add_parser("export-offsets", help="export the learned offset field")
    p_off.add_argument("--checkpoint", required=True)
    p_off.add_argument("--ref", required=True)
    p_off.add_argument("--out-prefix", required=True)
    common(p_off)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, args.overrides)
        if args.seed is not None:
            cfg.values["seed"] = args.seed
        if args.out is not None:
            cfg.values["out"] = args.out
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split)
        if args.command == "score":
            return cmd_score(cfg, args.checkpoint, args.ref, args.dist)
        if args.command == "export-offsets":
            return cmd_export_offsets(cfg, args.checkpoint, args.ref, args.out_prefix)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ManifestError, ImageFormatError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, DegenerateInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        # contract violations surfaced by model/checkpoint loading
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
