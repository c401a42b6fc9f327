"""Command-line interface.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .dataio import load_dataset, read_chip_png, read_map, read_mask_png, write_dataset, write_map
from .evaluation import (
    DEFAULT_THRESHOLDS,
    evaluate,
    format_table,
    gaussian_fit_baseline,
    predict_maps,
    size_estimation_baseline,
    uniform_disaggregation_report,
)
from .exceptions import DisaggError, NumericalError
from .predictor import Checkpoint
from .render import RenderSpec, colorize, save_png
from .scene import SceneConfig, filter_dataset, generate_dataset, split_dataset
from .train import TrainConfig, train

logger = logging.getLogger("disagg")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(DisaggError):
    pass


def _read_json(path, what):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"{what} file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{what} file {path} must hold a JSON object")
    return data


def _dataset_split(data_dir, cfg):
    samples = load_dataset(data_dir)
    samples = filter_dataset(samples, drop_zero_value=cfg.drop_zero_value, max_density=cfg.max_density)
    split = split_dataset(samples, cfg.val_frac, cfg.test_frac, seed=cfg.seed)
    return samples, split


def _select(samples, split, part):
    if part == "all":
        return samples
    return split.select(samples, part)


def cmd_gen_data(args):
    cfg = SceneConfig.from_dict(_read_json(args.config, "scene config"))
    if args.count < 1:
        raise UsageError("--count must be positive")
    samples = generate_dataset(cfg, args.count)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} scenes to {args.out}")


def cmd_train(args):
    cfg = TrainConfig.from_dict(_read_json(args.config, "train config"))
    samples, split = _dataset_split(args.data, cfg)

    def progress(epoch, loss, val_mae):
        logger.info("epoch %d train_loss=%.6g val_mae=%.6g", epoch, loss, val_mae)

    ckpt, log = train(cfg, split, samples, progress=progress)
    ckpt.save(args.out)
    if args.log:
        log.write(args.log)
    print(f"val_mae={ckpt.validation_metric!r}")


def _thresholds(args):
    return tuple(args.thresholds) if args.thresholds else DEFAULT_THRESHOLDS


def cmd_eval(args):
    thresholds = _thresholds(args)
    if args.ckpt:
        ckpt = Checkpoint.load(args.ckpt)
        cfg = TrainConfig.from_dict(ckpt.train_config)
        samples, split = _dataset_split(args.data, cfg)
        report = evaluate(ckpt, _select(samples, split, args.split), thresholds, sigma_level=args.sigma_level)
    else:
        cfg = TrainConfig.from_dict(_read_json(args.config, "train config")) if args.config else TrainConfig()
        samples, split = _dataset_split(args.data, cfg)
        target = _select(samples, split, args.split)
        train_samples = split.select(samples, "train")
        if not target:
            raise UsageError(f"split '{args.split}' is empty")
        if args.baseline == "gaussian-fit":
            labels = np.concatenate([s.labels for s in train_samples])
            _, _, report = gaussian_fit_baseline(labels, np.concatenate([s.labels for s in target]), thresholds)
        elif args.baseline == "size":
            report = size_estimation_baseline(train_samples, target)
        else:
            report = uniform_disaggregation_report(target)
    if args.out:
        Path(args.out).write_text(report.to_json())
    print(format_table([report], thresholds), end="")


def cmd_predict(args):
    ckpt = Checkpoint.load(args.ckpt)
    chip = read_chip_png(args.chip)
    mu, var = predict_maps(ckpt, chip)
    prefix = str(args.out)
    write_map(prefix + "_mu.f32", mu)
    written = [prefix + "_mu.f32"]
    if var is not None:
        write_map(prefix + "_sigma.f32", np.sqrt(var))
        written.append(prefix + "_sigma.f32")
    print("\n".join(written))


def cmd_render(args):
    spec = RenderSpec.from_dict(_read_json(args.spec, "render spec")) if args.spec else RenderSpec()
    values = read_map(args.map)
    mask = None
    if args.mask:
        mask = read_mask_png(args.mask)
        if mask.shape != values.shape:
            raise UsageError(f"mask shape {mask.shape} does not match map shape {values.shape}")
    save_png(args.out, colorize(values, spec, mask))
    print(args.out)


def build_parser():
    parser = argparse.ArgumentParser(prog="disagg", description="Probabilistic value disaggregation from region sums.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic scenes with oracle maps")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write its best checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a non-trained baseline")
    p.add_argument("--data", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--ckpt")
    group.add_argument("--baseline", choices=["gaussian-fit", "size", "uniform"])
    p.add_argument("--config", help="train config giving the split (baselines only)")
    p.add_argument("--split", choices=["train", "validation", "test", "all"], default="test")
    p.add_argument("--thresholds", type=float, nargs="+")
    p.add_argument("--sigma-level", choices=["region", "pixel"], default="region")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write per-pixel mean (and sigma) maps for a chip")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--chip", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("render", help="render a float32 map as a PNG heatmap")
    p.add_argument("--map", required=True)
    p.add_argument("--spec")
    p.add_argument("--mask", help="16-bit mask PNG for region outlines")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("DISAGG_THREADS")
    try:
        limit = int(threads) if threads else None
    except ValueError:
        print(f"error: DISAGG_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=limit):
            args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DisaggError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
