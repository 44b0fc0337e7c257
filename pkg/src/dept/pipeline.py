"""Dataset-level target generation: lidar + calib + pseudo boxes -> bundles."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .depth_targets import UncertaintyMap, cell_class_map, propagate, region_filter
from .geometry import lidar_to_sparse_depth
from .io_formats import (
    TargetBundle,
    count_classes,
    decode_grid,
    list_frames,
    load_frame,
    read_detections,
    read_velodyne_bin,
    write_target_bundle,
)
from .keypoint_targets import corner_heatmaps, detection_targets
from .losses import Lambdas, class_weights

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# (help text, whether the default is a published value or our choice)
FIELD_DOCS = {
    "stride": ("image pixels per target-grid cell", "chosen"),
    "max_depth": ("depth cutoff in metres; only nearer lidar cells are kept", "published"),
    "sigma_lo": ("uncertainty below which a seed fills a patch_lo square", "published"),
    "sigma_hi": ("uncertainty up to which a seed fills a patch_hi square", "published"),
    "patch_lo": ("patch side for the most reliable seeds", "published"),
    "patch_hi": ("patch side for moderately reliable seeds", "published"),
    "propagated_weight": ("loss weight of propagated depth cells", "chosen"),
    "score_threshold": ("pseudo-box confidence cut (strict <)", "chosen"),
    "sigma": ("constant uncertainty used when no sigma/<frame>.bin raster exists", "chosen"),
    "n_classes": ("number of detection classes", "chosen"),
    "image_w": ("image width when no image_2/<frame>.png is present", "chosen"),
    "image_h": ("image height when no image_2/<frame>.png is present", "chosen"),
    "seed": ("random seed", "chosen"),
    "lambda_depth": ("depth loss weight", "chosen"),
    "lambda_corner": ("corner heatmap loss weight", "chosen"),
    "lambda_center": ("center heatmap loss weight", "chosen"),
    "lambda_size": ("size regression loss weight", "chosen"),
    "lambda_offset": ("offset regression loss weight", "chosen"),
}


@dataclass
class PipelineConfig:
    stride: int = 4
    max_depth: float = 60.0
    sigma_lo: float = 0.3
    sigma_hi: float = 0.7
    patch_lo: int = 5
    patch_hi: int = 3
    propagated_weight: float = 1.0
    score_threshold: float = 0.3
    sigma: float = 1.0
    n_classes: int = 3
    image_w: int = 1242
    image_h: int = 375
    seed: int = 0
    lambda_depth: float = 1.0
    lambda_corner: float = 1.0
    lambda_center: float = 1.0
    lambda_size: float = 1.0
    lambda_offset: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if not 0 < self.sigma_lo < self.sigma_hi:
            raise ConfigError("sigma thresholds must satisfy 0 < sigma_lo < sigma_hi")
        for name in ("patch_lo", "patch_hi"):
            v = getattr(self, name)
            if v < 1 or v % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd integer, got {v}")
        if self.max_depth <= 0 or self.propagated_weight <= 0 or self.sigma <= 0:
            raise ConfigError("max_depth, propagated_weight and sigma must be positive")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")

    @property
    def lambdas(self) -> Lambdas:
        return Lambdas(self.lambda_depth, self.lambda_corner, self.lambda_center, self.lambda_size, self.lambda_offset)

    @classmethod
    def from_overrides(cls, overrides: dict) -> PipelineConfig:
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in overrides.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            caster = int if types[key] in ("int", int) else float
            try:
                kwargs[key] = caster(value)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {value!r} as {caster.__name__}") from None
        return cls(**kwargs)


def read_config_file(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _sigma_map(dataset_dir: Path, frame_id: str, width: int, height: int, config: PipelineConfig):
    path = dataset_dir / "sigma" / f"{frame_id}.bin"
    if not path.exists():
        return UncertaintyMap.constant(width, height, config.sigma), f"constant {config.sigma!r}"
    grid = decode_grid(path.read_bytes(), "<f4")
    if grid.shape != (1, height, width):
        raise ValueError(f"sigma raster {grid.shape} does not match grid (1, {height}, {width})")
    return UncertaintyMap(width, height, grid[0].astype(np.float64)), "raster"


def process_frame(dataset_dir, frame_id: str, boxes, config: PipelineConfig) -> TargetBundle:
    root = Path(dataset_dir)
    record = load_frame(root, frame_id, boxes, (config.image_w, config.image_h))
    points = read_velodyne_bin(record.lidar_path.read_bytes())
    cam, T = record.calib.camera, record.calib.extrinsic

    sparse = lidar_to_sparse_depth(points, T, cam, config.stride)
    filtered = region_filter(sparse, record.boxes, config.max_depth)
    sigma, sigma_source = _sigma_map(root, frame_id, sparse.width, sparse.height, config)
    depth = propagate(
        filtered, sigma, config.propagated_weight,
        config.sigma_lo, config.sigma_hi, config.patch_lo, config.patch_hi,
    )
    W, H = sparse.width, sparse.height
    corners = corner_heatmaps(record.boxes, config.stride, W, H)
    det = detection_targets(record.boxes, config.n_classes, config.stride, W, H)
    covered = cell_class_map(record.boxes, W, H, config.stride) >= 0

    metadata = {
        "image_size": list(record.image_size),
        "max_depth": config.max_depth,
        "sigma_thresholds": [config.sigma_lo, config.sigma_hi],
        "patch_sizes": [config.patch_lo, config.patch_hi],
        "propagated_weight": config.propagated_weight,
        "score_threshold": config.score_threshold,
        "score_threshold_note": "chosen default; no published value",
        "sigma_source": sigma_source,
        "counts": {
            "lidar_points": int(len(points)),
            "sparse_cells": sparse.count(),
            "filtered_cells": filtered.count(),
            "supervised_cells": depth.count(),
            "original_cells": depth.count_original(),
            "box_cells": int(covered.sum()),
            "boxes": len(record.boxes),
            "positives": len(det),
            "per_class": count_classes(record.boxes, config.n_classes),
        },
    }
    return TargetBundle(frame_id, depth, corners, det, metadata)


def _run_frame(args):
    dataset_dir, out_dir, frame_id, boxes, config = args
    try:
        bundle = process_frame(dataset_dir, frame_id, boxes, config)
        write_target_bundle(bundle, Path(out_dir) / "frames" / frame_id)
        return frame_id, bundle.metadata["counts"], None
    except Exception as exc:  # isolate per-frame failures
        return frame_id, None, f"{type(exc).__name__}: {exc}"


class NoFrames(ValueError):
    pass


def gen_targets(dataset_dir, out_dir, config: PipelineConfig, jobs: int | None = None) -> dict:
    """Build one target bundle per frame and a summary report.

    Frames that fail are skipped and listed under ``errors``; the report is
    ordered by frame id whatever the worker completion order.
    """
    root = Path(dataset_dir)
    frame_ids = list_frames(root)
    if not frame_ids:
        raise NoFrames(f"no frames found in {root}")
    det_path = root / "detections.ndjson"
    if not det_path.exists():
        raise FileNotFoundError(f"missing {det_path}")
    with det_path.open() as fh:
        dets = read_detections(fh, config.score_threshold)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(str(root), str(out), fid, dets.boxes.get(fid, []), config) for fid in frame_ids]
    jobs = jobs or os.cpu_count() or 1
    if jobs == 1 or len(tasks) == 1:
        results = [_run_frame(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            results = list(pool.map(_run_frame, tasks))

    frames, errors = [], []
    class_counts = [0] * config.n_classes
    totals = {}
    for frame_id, counts, err in sorted(results, key=lambda r: r[0]):
        if err is not None:
            errors.append({"frame_id": frame_id, "error": err})
            continue
        frames.append({"frame_id": frame_id, **{k: v for k, v in counts.items() if k != "per_class"}})
        for k, v in counts.items():
            if k != "per_class":
                totals[k] = totals.get(k, 0) + v
        class_counts = [a + b for a, b in zip(class_counts, counts["per_class"])]

    present = {k: c for k, c in enumerate(class_counts) if c > 0}
    weights = {}
    if present:
        table = class_weights(present)
        weights = {str(k): table.weights[k] for k in sorted(present)}
    report = {
        "tool_version": __version__,
        "config": asdict(config),
        "n_frames": len(frame_ids),
        "n_ok": len(frames),
        "frames": frames,
        "errors": errors,
        "totals": totals,
        "class_counts": class_counts,
        "class_weights": weights,
        "classes_without_samples": [k for k, c in enumerate(class_counts) if c == 0],
        "detections_dropped": {"low_score": dets.n_low_score, "degenerate": dets.n_degenerate},
    }
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    (out / "report.txt").write_text(format_report(report))
    return report


def format_report(report: dict) -> str:
    lines = [f"frames: {report['n_ok']}/{report['n_frames']} ok"]
    for f in report["frames"]:
        lines.append(
            f"  {f['frame_id']}: points={f['lidar_points']} sparse={f['sparse_cells']} "
            f"filtered={f['filtered_cells']} supervised={f['supervised_cells']} "
            f"boxes={f['boxes']} positives={f['positives']}"
        )
    t = report["totals"]
    if t:
        lines.append(
            f"totals: supervised={t['supervised_cells']} original={t['original_cells']} "
            f"filtered={t['filtered_cells']} boxes={t['boxes']}"
        )
    lines.append("class  count  weight")
    for k, c in enumerate(report["class_counts"]):
        w = report["class_weights"].get(str(k))
        lines.append(f"{k:>5}  {c:>5}  " + (f"{w:.4f}" if w is not None else "excluded (no samples)"))
    for e in report["errors"]:
        lines.append(f"ERROR {e['frame_id']}: {e['error']}")
    return "\n".join(lines) + "\n"

