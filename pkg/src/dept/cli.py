"""Command-line entry point.

Exit codes: 0 success, 1 input error, 2 verification or divergence failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .io_formats import ParseError, count_classes, read_detections
from .losses import LossBreakdown, ZeroCount, class_weights
from .pipeline import FIELD_DOCS, ConfigError, NoFrames, PipelineConfig, gen_targets, read_config_file

EXIT_OK, EXIT_INPUT, EXIT_VERIFY = 0, 1, 2

CSV_TERMS = ("depth", "corner_focal", "center_focal", "size", "offset", "total")

# pipeline flags and the config field each one sets
PIPELINE_FLAGS = {
    "--stride": ("stride", int),
    "--max-depth": ("max_depth", float),
    "--sigma-lo": ("sigma_lo", float),
    "--sigma-hi": ("sigma_hi", float),
    "--patch-lo": ("patch_lo", int),
    "--patch-hi": ("patch_hi", int),
    "--score-threshold": ("score_threshold", float),
    "--propagated-weight": ("propagated_weight", float),
    "--sigma": ("sigma", float),
    "--n-classes": ("n_classes", int),
    "--image-w": ("image_w", int),
    "--image-h": ("image_h", int),
    "--seed": ("seed", int),
}


def _setup_logging():
    level = os.environ.get("DEPT_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def _field_help(name: str) -> str:
    text, origin = FIELD_DOCS[name]
    default = next(f.default for f in fields(PipelineConfig) if f.name == name)
    tag = "published value" if origin == "published" else "chosen default"
    return f"{text} (default {default}; {tag})"


def _add_pipeline_flags(p: argparse.ArgumentParser, only=None):
    for flag, (name, typ) in PIPELINE_FLAGS.items():
        if only is None or name in only:
            p.add_argument(flag, dest=name, type=typ, default=None, help=_field_help(name))
    p.add_argument("--config", type=Path, help="file of key=value lines overriding defaults; flags win")


def _resolve_config(args) -> PipelineConfig:
    overrides = read_config_file(args.config) if args.config else {}
    for _, (name, _) in PIPELINE_FLAGS.items():
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    return PipelineConfig.from_overrides(overrides)


def cmd_gen_targets(args) -> int:
    try:
        config = _resolve_config(args)
        report = gen_targets(args.dataset_dir, args.out, config, args.jobs)
    except NoFrames as exc:
        print(f"error: no frames found ({exc})", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.json:
        print(json.dumps(report, sort_keys=True, indent=1))
    else:
        print((Path(args.out) / "report.txt").read_text(), end="")
    if report["errors"]:
        for e in report["errors"]:
            print(f"frame {e['frame_id']} failed: {e['error']}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_all

    results = run_all(args.seed, perturb=args.perturb_gradient)
    rows = [
        {"check": r.name, "n": r.n_checked, "worst_rel_error": r.worst, "pass": r.passed}
        for r in results
    ]
    if args.json:
        print(json.dumps({"tolerance": TOLERANCE, "checks": rows}, indent=1))
    else:
        print(f"{'check':<16} {'n':>5} {'worst rel err':>14}  result (tol {TOLERANCE:g})")
        for r in results:
            print(f"{r.name:<16} {r.n_checked:>5} {r.worst:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def _breakdown_row(b: LossBreakdown) -> list[str]:
    return [repr(float(getattr(b, t))) for t in CSV_TERMS]


def cmd_toy(args) -> int:
    from .losses import Lambdas
    from .toygrad import DivergenceDetected, TrainConfig, make_scenes, train, transfer_experiment, N_CORNERS, ToyNet

    config = TrainConfig(
        epochs=args.epochs, learning_rate=args.lr, seed=args.seed, batch=args.batch,
        propagated_weight=args.propagated_weight, lambdas=Lambdas(), lr_decay=args.lr_decay,
    )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    try:
        if args.mode == "train":
            writer.writerow(["epoch", *CSV_TERMS])
            scenes = make_scenes(args.scenes, args.seed)
            net = ToyNet.init(N_CORNERS + scenes[0].n_classes, args.seed)
            for epoch, b in enumerate(train(net, scenes, config, args.train_mode), start=1):
                writer.writerow([epoch, *_breakdown_row(b)])
            verdict = None
        else:
            writer.writerow(["seed", "run", "epoch", *CSV_TERMS])
            early_pre, early_scratch = [], []
            for k in range(args.seeds):
                seed = args.seed + k
                pre = make_scenes(args.scenes, 1000 + seed)
                fine = make_scenes(max(1, args.scenes // 2), 2000 + seed)
                cfg = TrainConfig(**{**config.__dict__, "seed": seed})
                res = transfer_experiment(pre, fine, cfg, args.pre_epochs)
                for run, hist in (("pretrained", res.pretrained), ("scratch", res.scratch)):
                    for epoch, b in enumerate(hist, start=1):
                        writer.writerow([seed, run, epoch, *_breakdown_row(b)])
                a, b = res.early_depth(5)
                early_pre.append(a)
                early_scratch.append(b)
            verdict = None
            if early_pre:
                mp, ms = float(np.mean(early_pre)), float(np.mean(early_scratch))
                verdict = "pretrained faster" if mp < ms else "no speedup"
    except DivergenceDetected as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_VERIFY

    text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    if verdict is not None:
        print(
            f"fine-tune epochs 1-5 mean depth loss: pretrained {mp:.4f} vs scratch {ms:.4f} -> {verdict}",
            file=sys.stderr if not args.out else sys.stdout,
        )
    return EXIT_OK


def cmd_class_weights(args) -> int:
    try:
        with open(args.detections) as fh:
            dets = read_detections(fh, args.score_threshold)
        counts = count_classes(dets.all_boxes(), args.n_classes)
    except (OSError, ParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        table = class_weights(counts)
    except ZeroCount as exc:
        print(f"error: class {exc.class_id} has zero samples; exclude or merge it", file=sys.stderr)
        return EXIT_VERIFY
    major = table.majority
    print(f"{'class':>5}  {'count':>10}  weight")
    for k in range(args.n_classes):
        mark = "  (majority)" if k == major else ""
        print(f"{k:>5}  {counts[k]:>10}  {table.weights[k]:.4f}{mark}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dept", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-targets", help="generate target bundles for a dataset directory")
    p.add_argument("dataset_dir", type=Path, help="directory with calib/, velodyne/ and detections.ndjson")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")
    p.add_argument("--json", action="store_true", help="print the machine-readable report")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_gen_targets)

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.add_argument("--perturb-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("toy", help="train the toy network or run the pre-train/fine-tune comparison")
    p.add_argument("mode", choices=("train", "transfer"))
    p.add_argument("--train-mode", choices=("depth_only", "detection_only", "combined"), default="combined")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--pre-epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lr-decay", type=float, default=0.98)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--scenes", type=int, default=12, help="pre-training scenes (fine-tuning uses half)")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds in transfer mode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--propagated-weight", type=float, default=1.0, help=_field_help("propagated_weight"))
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("class-weights", help="per-class loss weights from a detections file")
    p.add_argument("detections", type=Path)
    p.add_argument("--n-classes", type=int, required=True)
    p.add_argument("--score-threshold", type=float, default=0.3, help=_field_help("score_threshold"))
    p.set_defaults(func=cmd_class_weights)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
