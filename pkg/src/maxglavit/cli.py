"""Command-line interface: describe, grad-check, train, eval, predict, verify-data.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import metrics
from .dataio import CLASSES, DatasetError, DecodeError, InMemoryDataset, decode_image, load_split, \
    scan_dataset, synthetic_dataset, verify_hdv1
from .gradcheck import diagnose_ops, model_grad_check
from .model import PRESETS, CheckpointError, ConfigError, ModelConfig, build, format_describe, \
    load_checkpoint, param_count, preset
from .training import TrainConfig, TrainingError, save_history, train

DEFAULT_SEED = 42


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config files

def load_config_file(path, base: str | None = None) -> tuple[ModelConfig, dict]:
    """Read a JSON config; returns the model config and any training-field overrides.

    Keys are ``ModelConfig`` and ``TrainConfig`` field names plus an optional
    ``preset`` naming the base model configuration.
    """
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    name = data.pop("preset", base)
    if name is not None and name not in PRESETS:
        raise UsageError(f"unknown preset {name!r} in {path}")
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(data) - model_fields - train_fields)
    if unknown:
        raise UsageError(f"unknown config fields in {path}: {unknown}")
    model_part = {k: v for k, v in data.items() if k in model_fields}
    cfg = preset(name) if name is not None else ModelConfig()
    cfg = ModelConfig.from_dict({**cfg.to_dict(), **model_part})
    return cfg, {k: v for k, v in data.items() if k in train_fields}


def _model_config(args, default: str) -> tuple[ModelConfig, dict]:
    if args.config:
        return load_config_file(args.config, args.preset)
    return preset(args.preset or default), {}


def _seed(args, overrides: dict | None = None) -> int:
    if args.seed is not None:
        return args.seed
    return int((overrides or {}).get("seed", DEFAULT_SEED))


def _param_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = text.split("..")
        lo, hi = int(float(lo)), int(float(hi))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW..HIGH, got {text!r}") from None
    if lo > hi:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return lo, hi


# ---------------------------------------------------------------- subcommands

def cmd_describe(args) -> int:
    cfg, _ = _model_config(args, "maxglavit")
    model = build(cfg, seed=_seed(args), init=False)
    print(format_describe(model))
    total = param_count(model)
    print(f"total parameters: {total} ({total / 1e6:.2f}M)")
    if args.expect_params:
        lo, hi = args.expect_params
        if not lo <= total <= hi:
            print(f"parameter count {total} outside expected range [{lo}, {hi}]", file=sys.stderr)
            return 1
    return 0


def cmd_grad_check(args) -> int:
    cfg, _ = _model_config(args, "maxglavit")
    seed = _seed(args)
    report = model_grad_check(cfg, samples=args.samples, tolerance=args.tolerance, h=args.h, seed=seed)
    source = args.config or args.preset or "maxglavit"
    print(f"grad-check {source} samples={args.samples} h={args.h:g} seed={seed}")
    print(report.summary())
    if report.passed:
        return 0
    failing = {op: e for op, e in diagnose_ops().items() if not e <= 1e-6}
    if failing:
        for op, err in sorted(failing.items()):
            print(f"failing op {op}: max_rel_error={err:.3e}")
    else:
        print("all per-op backward rules pass; error arises from composition (check curvature or h)")
    return 1


def _train_config(args, overrides: dict) -> TrainConfig:
    values = dict(overrides)
    for flag, name in (("epochs", "epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size"),
                       ("decay_mode", "decay_mode"), ("clip_grad_norm", "clip_grad_norm")):
        v = getattr(args, flag)
        if v is not None:
            values[name] = v
    if args.no_augment:
        values["augment"] = False
    values["seed"] = _seed(args, overrides)
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg, overrides = _model_config(args, "tiny-test")
    tcfg = _train_config(args, overrides)
    if args.synthetic:
        data = synthetic_dataset(tcfg.seed, args.per_class, cfg.input_size, cfg.num_classes)
    else:
        manifest = scan_dataset(args.data)
        x, y = load_split(manifest, "train", cfg.input_size)
        xv, yv = load_split(manifest, "validation", cfg.input_size)
        data = InMemoryDataset(x, y, xv, yv, CLASSES)
    model = build(cfg, seed=tcfg.seed)

    def echo(rec):
        if not args.quiet:
            print(f"epoch {rec.epoch + 1}/{tcfg.epochs} lr={rec.lr:.6g} train_loss={rec.train_loss:.6f} "
                  f"train_acc={rec.train_acc:.4f} val_loss={rec.val_loss:.6f} val_acc={rec.val_acc:.4f}",
                  flush=True)

    history = train(model, data, tcfg, checkpoint_path=args.out, resume_from=args.resume, on_epoch=echo)
    history_path = args.history or (f"{args.out}.history.csv" if args.out else None)
    if history_path:
        save_history(history, history_path)
    if not len(history):
        print("no epochs to run")
        return 0
    last = history.records[-1]
    print(f"final epoch={last.epoch + 1} train_loss={last.train_loss:.6f} train_acc={last.train_acc:.4f} "
          f"val_loss={last.val_loss:.6f} val_acc={last.val_acc:.4f}")
    if args.out:
        print(f"best checkpoint: {args.out}")
    if history_path:
        print(f"history: {history_path}")
    return 0


def _read_pred_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """``true,pred`` rows; labels are integers or class names; a header row is optional."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc.strerror}") from exc
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if rows and rows[0][0].strip().lower() in ("true", "y_true", "label"):
        rows = rows[1:]
    names = {c: i for i, c in enumerate(CLASSES)}

    def parse(v):
        v = v.strip()
        return names[v] if v in names else int(v)

    yt, yp = [], []
    for n, row in enumerate(rows, 1):
        if len(row) != 2 or not all(c.strip() for c in row):
            raise metrics.MetricsError(f"{path}: row {n} has {len(row)} fields, expected true,pred")
        try:
            yt.append(parse(row[0]))
            yp.append(parse(row[1]))
        except ValueError:
            raise metrics.MetricsError(f"{path}: row {n} has a non-integer label {row}") from None
    return np.array(yt, dtype=np.int64), np.array(yp, dtype=np.int64)


def cmd_eval(args) -> int:
    if args.pred:
        y_true, y_pred = _read_pred_csv(args.pred)
        k = args.num_classes
    else:
        if not (args.ckpt and args.data):
            raise UsageError("eval needs --pred CSV, or --ckpt with --data")
        model = load_checkpoint(args.ckpt)
        x, y_true = load_split(scan_dataset(args.data), args.split, model.config.input_size)
        probs = [model.predict_proba(x[i:i + 32]) for i in range(0, len(x), 32)]
        y_pred = np.argmax(np.concatenate(probs), axis=1) if probs else np.zeros(0, np.int64)
        k = model.config.num_classes
    cm = metrics.confusion(y_true, y_pred, k)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        text, csv_text = metrics.render_report(cm, args.averaging)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(text)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    else:
        print()
        print(csv_text, end="")
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.ckpt)
    k = model.config.num_classes
    names = CLASSES if k == len(CLASSES) else tuple(str(i) for i in range(k))
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["path", "label", *(f"p_{n}" for n in names)])
    failed = 0
    for path in args.image:
        try:
            sample = decode_image(path, model.config.input_size)
        except DecodeError as exc:
            print(f"error: {exc}", file=sys.stderr)
            failed += 1
            continue
        p = model.predict_proba(sample.pixels[None].astype(model.dtype))[0].astype(np.float64)
        out.writerow([path, names[int(np.argmax(p))], *(f"{v:.9f}" for v in p)])
    sys.stdout.flush()
    if failed:
        print(f"{failed} of {len(args.image)} images failed to decode", file=sys.stderr)
        return 1
    return 0


def cmd_verify_data(args) -> int:
    manifest = scan_dataset(args.data)
    print(manifest.to_json() if args.json else manifest.summary())
    if args.expect_hdv1:
        diffs = verify_hdv1(manifest)
        if diffs:
            print("HDV1 count mismatch:", file=sys.stderr)
            for d in diffs:
                print(f"  {d}", file=sys.stderr)
            return 1
        print("HDV1 counts match")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maxglavit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def model_flags(sp, default):
        sp.add_argument("--preset", choices=PRESETS, default=None, help=f"model preset (default {default})")
        sp.add_argument("--config", metavar="FILE", help="JSON file of ModelConfig/TrainConfig fields")
        sp.add_argument("--seed", type=int, help=f"random seed (default {DEFAULT_SEED})")

    sp = sub.add_parser("describe", help="layer table and parameter count")
    model_flags(sp, "maxglavit")
    sp.add_argument("--expect-params", type=_param_range, metavar="LOW..HIGH",
                    help="exit 1 unless the total lies in this inclusive range")
    sp.set_defaults(func=cmd_describe)

    sp = sub.add_parser("grad-check", help="finite-difference gradient check of a reduced model")
    model_flags(sp, "maxglavit")
    sp.add_argument("--samples", type=int, default=50)
    sp.add_argument("--tolerance", type=float, default=1e-3)
    sp.add_argument("--h", type=float, default=1e-4, help="central-difference step")
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("train", help="train a model; writes checkpoint and history CSV")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", metavar="DIR", help="dataset root with train/validation/test splits")
    src.add_argument("--synthetic", action="store_true", help="use the synthetic disc dataset")
    model_flags(sp, "tiny-test")
    sp.add_argument("--out", metavar="CKPT", help="best checkpoint path (latest state goes to CKPT.last)")
    sp.add_argument("--history", metavar="CSV", help="history CSV path (default CKPT.history.csv)")
    sp.add_argument("--resume", metavar="CKPT", help="resume from a CKPT.last file")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--decay-mode", choices=("step", "weight_decay"))
    sp.add_argument("--clip-grad-norm", type=float)
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--per-class", type=int, default=16, help="synthetic images per class (default 16)")
    sp.add_argument("-q", "--quiet", action="store_true", help="suppress per-epoch lines")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metric report for a checkpoint or a prediction CSV")
    sp.add_argument("--ckpt")
    sp.add_argument("--data", metavar="DIR")
    sp.add_argument("--split", choices=("train", "validation", "test"), default="test")
    sp.add_argument("--pred", metavar="CSV", help="CSV of true,pred label pairs")
    sp.add_argument("--num-classes", type=int, default=3)
    sp.add_argument("--averaging", choices=("weighted", "macro"), default="weighted")
    sp.add_argument("--csv", metavar="FILE", help="write the CSV report here instead of stdout")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="classify images with a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", nargs="+", required=True, metavar="PATH")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("verify-data", help="check a dataset tree and print per-split counts")
    sp.add_argument("--data", required=True, metavar="DIR")
    sp.add_argument("--expect-hdv1", action="store_true", help="require the HDV1 reference counts")
    sp.add_argument("--json", action="store_true", help="print the manifest as JSON")
    sp.set_defaults(func=cmd_verify_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, DecodeError, CheckpointError, ConfigError, TrainingError, metrics.MetricsError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
