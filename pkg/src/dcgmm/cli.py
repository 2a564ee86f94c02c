"""Command-line interface.

Subcommands: train, density, outlier, sample, inpaint, alphabet, info.
Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numerical abort.  Every randomized command takes an explicit --seed or
derives one from the hash of its effective settings (logged).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import zlib

import numpy as np

from . import data as dio
from . import evaluation as ev
from . import model as mg
from . import sampling as sp
from . import training as tr
from .tensor import (CheckpointError, ConfigError, DataError, NumericalError,
                     Shape3)

log = logging.getLogger("dcgmm")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def parse_shape(text: str) -> Shape3:
    try:
        h, w, c = (int(p) for p in text.lower().split("x"))
        return Shape3(h, w, c)
    except ValueError as exc:
        raise ConfigError(f"cannot parse shape '{text}', expected HxWxC") from exc


def read_config_file(path) -> dict[str, str]:
    """key=value lines; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def apply_config_defaults(args: argparse.Namespace, keys: dict[str, type]) -> None:
    """Fill unset CLI options from the --config file; flags win."""
    if not getattr(args, "config", None):
        return
    conf = read_config_file(args.config)
    for key, value in conf.items():
        if key not in keys:
            raise ConfigError(f"unknown config key '{key}'")
        if getattr(args, key, None) is None:
            caster = keys[key]
            setattr(args, key, caster(value))


def derive_seed(args: argparse.Namespace) -> int:
    """Deterministic seed from the effective settings when none was given."""
    if args.seed is not None:
        return args.seed
    canon = "\n".join(f"{k}={v}" for k, v in sorted(vars(args).items())
                      if k not in ("func",) and v is not None)
    seed = zlib.crc32(canon.encode())
    log.info("no --seed given; derived seed %d from settings hash", seed)
    return seed


def load_dataset_args(images, labels, classes=None, per_class_cap=None) -> dio.Dataset:
    ds = dio.load_idx(images, labels)
    if classes:
        keep = [int(c) for c in classes.split(",")]
        ds = dio.filter_classes(ds, keep, per_class_cap)
    return ds


# ------------------------------------------------------------- subcommands

def cmd_info(args) -> int:
    if args.preset:
        report = mg.canonical_model_report(args.preset.upper())
        print(f"DCGMM-{report['preset']}: {report['config']}")
        if report["shapes"] is not None:
            for i, shape in enumerate(report["shapes"]):
                print(f"  layer {i}: -> {shape[0]}x{shape[1]}x{shape[2]}")
            print(f"parameters (centroids): {report['count']}")
        else:
            print(f"  does not build: {report['error']}")
        print(f"expected count: {report['expected_count']}  "
              f"match: {report['matches']}")
        if report["note"]:
            print(f"DISCREPANCY: {report['note']}")
        return EXIT_OK
    cfg = mg.parse_config(args.arch, parse_shape(args.input))
    model = mg.build_model(cfg, seed=0)
    for i, (spec, shape) in enumerate(zip(cfg.layers, model.out_shapes)):
        print(f"  layer {i} {spec.token()}: -> {shape.h}x{shape.w}x{shape.c}")
    print(f"parameters (centroids): {mg.count_parameters(model)}")
    print(f"trainable scalars: {mg.count_trainables(model)}")
    return EXIT_OK


def cmd_train(args) -> int:
    apply_config_defaults(args, {
        "arch": str, "input": str, "images": str, "labels": str,
        "test_images": str, "test_labels": str, "epochs": int,
        "batch_size": int, "lr_mu": float, "lr_logits": float,
        "lr_prec": float, "lr_classifier": float, "seed": int,
        "classes": str, "per_class_cap": int, "out": str, "name": str,
        "eval_every": int,
    })
    for req in ("arch", "input", "images", "out"):
        if getattr(args, req) is None:
            raise ConfigError(f"train needs --{req.replace('_', '-')} (flag or config)")
    seed = derive_seed(args)
    os.makedirs(args.out, exist_ok=True)
    ds = load_dataset_args(args.images, args.labels, args.classes, args.per_class_cap)
    holdout = None
    if args.test_images:
        holdout = load_dataset_args(args.test_images, args.test_labels,
                                    args.classes, args.per_class_cap)
    cfg = mg.parse_config(args.arch, parse_shape(args.input),
                          name=args.name or "dcgmm")
    model = mg.build_model(cfg, seed=seed)
    schedule = tr.TrainSchedule(
        epochs=args.epochs if args.epochs is not None else 10,
        batch_size=args.batch_size if args.batch_size is not None else 100,
        lr_mu=args.lr_mu if args.lr_mu is not None else 0.011,
        lr_logits=args.lr_logits if args.lr_logits is not None else 0.0011,
        lr_prec=args.lr_prec if args.lr_prec is not None else 0.0011,
        lr_classifier=args.lr_classifier if args.lr_classifier is not None else 0.01,
        seed=seed, eval_every=args.eval_every)
    ckpt = os.path.join(args.out, "model.ckpt")
    _, lg = tr.train(model, ds, schedule, holdout=holdout,
                     snapshot_path=os.path.join(args.out, "abort.ckpt"))
    mg.save(model, ckpt)
    lg.to_csv(os.path.join(args.out, "trainlog.csv"), split="train")
    if holdout is not None:
        lg.to_csv(os.path.join(args.out, "holdout.csv"), split="holdout")
    print(f"checkpoint: {ckpt}")
    for i, loss in tr.evaluate_losses(model, ds.images).items():
        print(f"final train loss, cGMM layer {model.cgmm_ordinal(i)}: {loss:.6f}")
    return EXIT_OK


def cmd_density(args) -> int:
    model = mg.load(args.model)
    ds = load_dataset_args(args.images, args.labels, args.classes, args.per_class_cap)
    losses = tr.evaluate_losses(model, ds.images)
    lines = ["layer,loss"]
    for i, loss in losses.items():
        lines.append(f"{model.cgmm_ordinal(i)},{loss!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text, end="")
    return EXIT_OK


def cmd_outlier(args) -> int:
    model = mg.load(args.model)
    ds = dio.load_idx(args.images, args.labels)
    inlier_classes = [int(c) for c in args.inlier_classes.split(",")]
    outlier_classes = [int(c) for c in args.outlier_classes.split(",")]
    inliers = dio.filter_classes(ds, inlier_classes, args.per_class_cap)
    outliers = dio.filter_classes(ds, outlier_classes, args.per_class_cap)
    curve = ev.outlier_roc(model, args.layer, inliers.images, outliers.images)
    if args.roc_out:
        curve.to_csv(args.roc_out)
    print(f"AUC: {curve.auc:.6f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    model = mg.load(args.model)
    if args.class_label is not None and model.classifier_index is None:
        raise ConfigError("--class requires a model with a classifier layer")
    seed = derive_seed(args)
    sampler = sp.SamplerConfig(top_s=args.top_s, seed=seed,
                               variance_scale=args.variance_scale)
    sharpen_cfg = None
    if args.sharpen_iters:
        sharpen_cfg = sp.SharpenConfig(iterations=args.sharpen_iters,
                                       step_size=args.sharpen_step)
    images = sp.sample(model, args.class_label, sampler, sharpen_cfg, n=args.n)
    dio.write_png_grid(images, args.cols, args.out)
    print(f"samples: {args.out}")
    if args.loss_csv:
        losses = tr.per_sample_losses(model, np.clip(images, 0.0, 1.0))
        top = model.topmost_cgmm_index
        with open(args.loss_csv, "w") as fh:
            fh.write("sample,loss\n")
            for i, loss in enumerate(losses[top]):
                fh.write(f"{i},{loss!r}\n")
    return EXIT_OK


def _build_mask(shape: Shape3, erase: str, frac: float) -> np.ndarray:
    mask = np.ones((shape.h, shape.w), dtype=bool)
    span_h = int(round(shape.h * frac))
    span_w = int(round(shape.w * frac))
    if erase == "right":
        mask[:, shape.w - span_w:] = False
    elif erase == "left":
        mask[:, :span_w] = False
    elif erase == "top":
        mask[:span_h, :] = False
    elif erase == "bottom":
        mask[shape.h - span_h:, :] = False
    else:
        raise ConfigError(f"unknown erase region '{erase}'")
    return mask


def cmd_inpaint(args) -> int:
    model = mg.load(args.model)
    ds = load_dataset_args(args.images, args.labels, args.classes, args.per_class_cap)
    seed = derive_seed(args)
    images = ds.images[:args.n]
    mask = _build_mask(model.config.input_shape, args.erase, args.frac)
    sampler = sp.SamplerConfig(seed=seed, variance_scale=args.variance_scale)
    sharpen_cfg = None
    if args.sharpen_iters:
        sharpen_cfg = sp.SharpenConfig(iterations=args.sharpen_iters,
                                       step_size=args.sharpen_step)
    completed = sp.inpaint(model, images, mask, sampler, sharpen_cfg)
    masked = images * mask[None, :, :, None]
    side_by_side = np.stack([masked, completed], axis=1).reshape(-1, *images.shape[1:])
    dio.write_png_grid(side_by_side, 2 * args.cols, args.out)
    print(f"in-painting grid (masked | completed pairs): {args.out}")
    return EXIT_OK


def cmd_alphabet(args) -> int:
    model = mg.load(args.model)
    sheet = ev.export_alphabet(model, args.layer)
    cols = int(np.ceil(np.sqrt(sheet.patches.shape[0])))
    clipped = np.clip(sheet.patches, 0.0, 1.0)
    dio.write_png_grid(clipped, cols, args.out)
    print(f"alphabet ({sheet.patches.shape[0]} patches of "
          f"{sheet.f}x{sheet.f}x{sheet.channels}): {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcgmm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_data_opts(sp_, labels_required=False):
        sp_.add_argument("--images", required=False)
        sp_.add_argument("--labels", required=labels_required)
        sp_.add_argument("--classes", help="comma-separated class filter")
        sp_.add_argument("--per-class-cap", dest="per_class_cap", type=int)

    pi = sub.add_parser("info", help="shapes and parameter counts")
    pi.add_argument("--arch")
    pi.add_argument("--input", help="input shape HxWxC")
    pi.add_argument("--preset", help="canonical configuration A..G")
    pi.set_defaults(func=cmd_info)

    pt = sub.add_parser("train", help="train a model from a config/flags")
    pt.add_argument("--config", help="key=value settings file")
    pt.add_argument("--arch")
    pt.add_argument("--input")
    pt.add_argument("--name")
    add_data_opts(pt)
    pt.add_argument("--test-images", dest="test_images")
    pt.add_argument("--test-labels", dest="test_labels")
    pt.add_argument("--epochs", type=int)
    pt.add_argument("--batch-size", dest="batch_size", type=int)
    pt.add_argument("--lr-mu", dest="lr_mu", type=float)
    pt.add_argument("--lr-logits", dest="lr_logits", type=float)
    pt.add_argument("--lr-prec", dest="lr_prec", type=float)
    pt.add_argument("--lr-classifier", dest="lr_classifier", type=float)
    pt.add_argument("--eval-every", dest="eval_every", type=int)
    pt.add_argument("--seed", type=int)
    pt.add_argument("--out", help="output directory")
    pt.set_defaults(func=cmd_train)

    pd = sub.add_parser("density", help="per-layer mean losses on a dataset")
    pd.add_argument("--model", required=True)
    add_data_opts(pd)
    pd.add_argument("--out")
    pd.set_defaults(func=cmd_density)

    po = sub.add_parser("outlier", help="ROC curve and AUC for outlier detection")
    po.add_argument("--model", required=True)
    po.add_argument("--images", required=True)
    po.add_argument("--labels", required=True)
    po.add_argument("--inlier-classes", dest="inlier_classes", required=True)
    po.add_argument("--outlier-classes", dest="outlier_classes", required=True)
    po.add_argument("--per-class-cap", dest="per_class_cap", type=int)
    po.add_argument("--layer", type=int, help="cGMM ordinal; default topmost")
    po.add_argument("--roc-out", dest="roc_out")
    po.set_defaults(func=cmd_outlier)

    ps = sub.add_parser("sample", help="generate a PNG grid of samples")
    ps.add_argument("--model", required=True)
    ps.add_argument("--n", type=int, default=64)
    ps.add_argument("--cols", type=int, default=8)
    ps.add_argument("--class", dest="class_label", type=int)
    ps.add_argument("--top-s", dest="top_s", type=int)
    ps.add_argument("--variance-scale", dest="variance_scale", type=float, default=1.0)
    ps.add_argument("--sharpen-iters", dest="sharpen_iters", type=int, default=0)
    ps.add_argument("--sharpen-step", dest="sharpen_step", type=float, default=1.0)
    ps.add_argument("--seed", type=int)
    ps.add_argument("--out", required=True)
    ps.add_argument("--loss-csv", dest="loss_csv")
    ps.set_defaults(func=cmd_sample)

    pp = sub.add_parser("inpaint", help="complete occluded images")
    pp.add_argument("--model", required=True)
    add_data_opts(pp)
    pp.add_argument("--n", type=int, default=16)
    pp.add_argument("--cols", type=int, default=4)
    pp.add_argument("--erase", default="right", choices=["right", "left", "top", "bottom"])
    pp.add_argument("--frac", type=float, default=0.5)
    pp.add_argument("--variance-scale", dest="variance_scale", type=float, default=1.0)
    pp.add_argument("--sharpen-iters", dest="sharpen_iters", type=int, default=0)
    pp.add_argument("--sharpen-step", dest="sharpen_step", type=float, default=1.0)
    pp.add_argument("--seed", type=int)
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_inpaint)

    pa = sub.add_parser("alphabet", help="export centroid patches as PNG")
    pa.add_argument("--model", required=True)
    pa.add_argument("--layer", type=int, default=1, help="cGMM ordinal (default lowest)")
    pa.add_argument("--out", required=True)
    pa.set_defaults(func=cmd_alphabet)

    return p


def cli(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "info" and not args.preset and not (args.arch and args.input):
            raise ConfigError("info needs --preset or both --arch and --input")
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(cli())
