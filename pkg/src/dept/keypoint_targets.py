"""Gaussian heatmap rendering for box corners and class centers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SIGMA_FLOOR = 2.0 / 3.0
MIN_IOU = 0.7

# channel order of corner heatmaps
CORNERS = ("top_left", "top_right", "bottom_right", "bottom_left")


class InvalidBox(ValueError):
    pass


class InvalidClass(ValueError):
    pass


@dataclass
class HeatmapSet:
    values: np.ndarray  # (C, H, W)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"heatmaps must be 3-D (C, H, W), got shape {self.values.shape}")

    @classmethod
    def zeros(cls, channels: int, width: int, height: int) -> HeatmapSet:
        return cls(np.zeros((channels, height, width)))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class Keypoint:
    channel: int
    px: float
    py: float
    sigma_p: float

    def __post_init__(self):
        if not self.sigma_p > 0:
            raise ValueError(f"sigma_p must be positive, got {self.sigma_p}")

    @property
    def cell(self) -> tuple[int, int]:
        """(col, row) after round-half-up."""
        return round_half_up(self.px), round_half_up(self.py)


@dataclass
class DetectionTargets:
    """Center heatmaps plus per-positive size and sub-cell offset targets.

    ``indices`` rows are (class_id, row, col); ``sizes`` rows are (w, h) in
    cells and ``offsets`` rows are (dx, dy) in [0, 1).
    """

    center_heatmaps: HeatmapSet
    indices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    sizes: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    offsets: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __len__(self) -> int:
        return len(self.indices)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _iou_roots(w: float, h: float, min_iou: float) -> tuple[float, float, float]:
    # corner shift r that leaves IoU == min_iou in three configurations
    # 1) one corner in, one out: (w-r)(h-r) / (2wh - (w-r)(h-r))
    b1 = w + h
    c1 = w * h * (1 - min_iou) / (1 + min_iou)
    r1 = (b1 - math.sqrt(b1 * b1 - 4 * c1)) / 2
    # 2) both corners in: (w-2r)(h-2r) / wh
    b2 = 2 * (w + h)
    c2 = (1 - min_iou) * w * h
    r2 = (b2 - math.sqrt(b2 * b2 - 16 * c2)) / 8
    # 3) both corners out: wh / ((w+2r)(h+2r))
    a3 = 4 * min_iou
    b3 = 2 * min_iou * (w + h)
    c3 = (min_iou - 1) * w * h
    r3 = (-b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / (2 * a3)
    return r1, r2, r3


def overlap_radius(box_w: float, box_h: float, min_iou: float = MIN_IOU) -> float:
    """Largest corner shift keeping IoU >= ``min_iou`` in every configuration."""
    if not (box_w > 0 and box_h > 0):
        raise InvalidBox(f"box dims must be positive, got {box_w}x{box_h}")
    if not 0 < min_iou < 1:
        raise ValueError(f"min_iou must be in (0, 1), got {min_iou}")
    return min(_iou_roots(box_w, box_h, min_iou))


def gaussian_sigma(box_w: float, box_h: float, min_iou: float = MIN_IOU) -> float:
    return max(overlap_radius(box_w, box_h, min_iou) / 3.0, SIGMA_FLOOR)


def render_keypoints(keypoints, channels: int, width: int, height: int) -> HeatmapSet:
    """Max-combine one Gaussian per keypoint into a (C, H, W) heatmap set."""
    out = HeatmapSet.zeros(channels, width, height)
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    for kp in keypoints:
        if not 0 <= kp.channel < channels:
            raise ValueError(f"keypoint channel {kp.channel} outside [0, {channels})")
        cx, cy = kp.cell
        if not (0 <= cx < width and 0 <= cy < height):
            raise ValueError(f"keypoint cell ({cx}, {cy}) outside {width}x{height} grid")
        d2 = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2
        g = np.exp(-d2 / (2 * kp.sigma_p ** 2))
        np.maximum(out.values[kp.channel], g, out=out.values[kp.channel])
    return out


def _overlaps_grid(box, width: int, height: int) -> bool:
    return box.x_max >= 0 and box.y_max >= 0 and box.x_min <= width and box.y_min <= height


def _clamp(v: float, hi: int) -> float:
    return min(max(v, 0.0), hi - 1.0)


def corner_heatmaps(boxes, stride: int, width: int, height: int) -> HeatmapSet:
    """4-channel corner heatmaps (TL, TR, BR, BL) on the stride grid.

    Corners on or past the grid edge are clamped onto the border cells;
    boxes entirely off the grid are skipped.
    """
    keypoints = []
    for box in boxes:
        b = box.scaled(1.0 / stride)
        if not _overlaps_grid(b, width, height):
            continue
        sigma = gaussian_sigma(b.width, b.height)
        corners = ((b.x_min, b.y_min), (b.x_max, b.y_min), (b.x_max, b.y_max), (b.x_min, b.y_max))
        for ch, (x, y) in enumerate(corners):
            px, py = _clamp(x, width), _clamp(y, height)
            # round-half-up of the clamped value can still hit the edge
            px, py = min(round_half_up(px), width - 1), min(round_half_up(py), height - 1)
            keypoints.append(Keypoint(ch, px, py, sigma))
    return render_keypoints(keypoints, 4, width, height)


def detection_targets(boxes, n_classes: int, stride: int, width: int, height: int) -> DetectionTargets:
    """Class-center heatmaps with size and offset regression targets.

    The positive cell is the floor of the stride-scaled box center, so the
    offset is its fractional part. Same-class boxes sharing a cell keep the
    smaller box's regression targets.
    """
    entries: dict[tuple[int, int, int], tuple[float, tuple, tuple]] = {}
    for box in boxes:
        if box.class_id >= n_classes:
            raise InvalidClass(f"class_id {box.class_id} >= n_classes {n_classes}")
        b = box.scaled(1.0 / stride)
        cx = (b.x_min + b.x_max) / 2
        cy = (b.y_min + b.y_max) / 2
        col, row = math.floor(cx), math.floor(cy)
        if not (0 <= col < width and 0 <= row < height):
            continue
        key = (box.class_id, row, col)
        area = b.width * b.height
        if key in entries and entries[key][0] <= area:
            continue
        entries[key] = (area, (b.width, b.height), (cx - col, cy - row))

    keys = sorted(entries)
    keypoints = [
        Keypoint(k[0], k[2], k[1], gaussian_sigma(*entries[k][1])) for k in keys
    ]
    heat = render_keypoints(keypoints, n_classes, width, height)
    if not keys:
        return DetectionTargets(heat)
    return DetectionTargets(
        heat,
        np.array(keys, dtype=np.int64).reshape(-1, 3),
        np.array([entries[k][1] for k in keys], dtype=np.float64),
        np.array([entries[k][2] for k in keys], dtype=np.float64),
    )
