"""Readers and writers for calibration, lidar, detections and target bundles.

On-disk formats
---------------
* KITTI object calib text: ``KEY: v0 v1 ...`` lines.
* Velodyne ``.bin``: little-endian float32 quadruples ``(x, y, z, intensity)``.
* Detections: one JSON object per line with ``frame_id``, ``class_id``,
  ``bbox`` ``[x1, y1, x2, y2]`` and ``score``.
* Target bundle directory:

  ``depth.png``       16-bit PNG, ``round(depth * 256)``, 0 = unsupervised
  ``depth_raw.bin``   header + float64 planes (depth, weight, provenance, source)
  ``corners.bin``     header + float32 (4, H, W)
  ``centers.bin``     header + float32 (C, H, W)
  ``detection.json``  positive-cell indices, sizes and offsets
  ``meta.json``       stride, thresholds, counts, tool version

  Binary headers are 16 bytes: ``b"DEPT"`` then little-endian u32 C, H, W.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple

import numpy as np
from PIL import Image

from . import __version__
from .depth_targets import Box2D, SemiDenseDepthTarget
from .geometry import CameraModel, RigidTransform, nearest_rotation
from .keypoint_targets import DetectionTargets, HeatmapSet

log = logging.getLogger(__name__)

MAGIC = b"DEPT"
HEADER = struct.Struct("<4sIII")
DEPTH_SCALE = 256.0
KITTI_IMAGE_SIZE = (1242, 375)
KITTI_CLASSES = {"Car": 0, "Pedestrian": 1, "Cyclist": 2}

_CALIB_ALIASES = {
    "P2": ("P2",),
    "Tr_velo_to_cam": ("Tr_velo_to_cam", "Tr_velo_cam"),
    "R0_rect": ("R0_rect", "R_rect"),
}
_CALIB_SIZES = {"P2": 12, "Tr_velo_to_cam": 12, "R0_rect": 9}


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class MissingKey(KeyError):
    pass


class TruncatedFile(ValueError):
    pass


class CorruptHeader(ValueError):
    pass


class UnknownClass(ValueError):
    pass


# ---------------------------------------------------------------------------
# calibration


class KittiCalib(NamedTuple):
    camera: CameraModel
    extrinsic: RigidTransform  # velodyne -> rectified camera of P2
    rect: np.ndarray | None
    P2: np.ndarray


def _parse_calib_lines(text: str) -> dict[str, tuple[int, np.ndarray]]:
    wanted = {alias: key for key, aliases in _CALIB_ALIASES.items() for alias in aliases}
    found: dict[str, tuple[int, np.ndarray]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if ":" not in line:
            raise ParseError(f"expected 'KEY: values', got {line[:40]!r}", lineno)
        name, _, rest = line.partition(":")
        key = wanted.get(name.strip())
        if key is None:
            continue
        try:
            values = np.array([float(tok) for tok in rest.split()])
        except ValueError as exc:
            raise ParseError(f"{name.strip()}: {exc}", lineno) from None
        if values.size != _CALIB_SIZES[key]:
            raise ParseError(
                f"{name.strip()} needs {_CALIB_SIZES[key]} floats, got {values.size}", lineno
            )
        found[key] = (lineno, values)
    return found


def read_kitti_calib(text: str, image_size: tuple[int, int] = KITTI_IMAGE_SIZE) -> KittiCalib:
    """Parse a KITTI object-benchmark calibration file.

    The returned extrinsic maps velodyne points into the rectified frame of
    camera 2: ``R0_rect`` (when present) is composed in and the small
    translation baked into ``P2`` is folded into the translation, so that
    projecting with the intrinsics alone reproduces ``P2 @ R0 @ Tr``.
    """
    found = _parse_calib_lines(text)
    for key in ("P2", "Tr_velo_to_cam"):
        if key not in found:
            raise MissingKey(key)
    P2 = found["P2"][1].reshape(3, 4)
    Tr = found["Tr_velo_to_cam"][1].reshape(3, 4)
    rect = found["R0_rect"][1].reshape(3, 3) if "R0_rect" in found else None

    fx, fy, cx, cy = P2[0, 0], P2[1, 1], P2[0, 2], P2[1, 2]
    try:
        camera = CameraModel(float(fx), float(fy), float(cx), float(cy), *image_size)
    except ValueError as exc:
        raise ParseError(f"P2: {exc}", found["P2"][0]) from None

    R, t = Tr[:, :3], Tr[:, 3]
    if rect is not None:
        R, t = rect @ R, rect @ t
    # P2 = K [I | b]  =>  b = K^-1 P2[:, 3]
    t = t + np.linalg.solve(camera.K, P2[:, 3])
    extrinsic = RigidTransform(nearest_rotation(R), t)
    return KittiCalib(camera, extrinsic, rect, P2)


# ---------------------------------------------------------------------------
# lidar


def read_velodyne_bin(data: bytes) -> np.ndarray:
    """Decode a velodyne scan into an (N, 4) float32 array."""
    if len(data) % 16:
        raise TruncatedFile(f"{len(data)} bytes is not a multiple of 16 (last record cut at byte {len(data) - len(data) % 16})")
    return np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float32)


def write_velodyne_bin(points) -> bytes:
    return np.ascontiguousarray(np.asarray(points, dtype="<f4").reshape(-1, 4)).tobytes()


# ---------------------------------------------------------------------------
# detections / labels


@dataclass
class DetectionSet:
    boxes: dict[str, list[Box2D]] = field(default_factory=dict)
    n_low_score: int = 0
    n_degenerate: int = 0

    def all_boxes(self) -> list[Box2D]:
        return [b for fid in sorted(self.boxes) for b in self.boxes[fid]]


def read_detections(lines: Iterable[str], score_threshold: float = 0.3) -> DetectionSet:
    """Parse newline-delimited JSON detections.

    Boxes scoring below ``score_threshold`` are dropped; boxes without
    positive extent are dropped and counted in ``n_degenerate``.
    """
    out = DetectionSet()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            frame_id = rec["frame_id"]
            class_id = rec["class_id"]
            x1, y1, x2, y2 = (float(v) for v in rec["bbox"])
            score = float(rec["score"])
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
        except KeyError as exc:
            raise ParseError(f"missing field {exc.args[0]!r}", lineno) from None
        except (TypeError, ValueError) as exc:
            raise ParseError(f"bad field value: {exc}", lineno) from None
        if not isinstance(frame_id, str) or isinstance(class_id, bool) or not isinstance(class_id, int) or class_id < 0:
            raise ParseError("frame_id must be a string and class_id a non-negative integer", lineno)
        if not all(math.isfinite(v) for v in (x1, y1, x2, y2, score)):
            raise ParseError("non-finite bbox or score", lineno)
        boxes = out.boxes.setdefault(frame_id, [])
        if score < score_threshold:
            out.n_low_score += 1
            continue
        if not (x1 < x2 and y1 < y2):
            out.n_degenerate += 1
            log.warning("line %d: dropping degenerate box %s", lineno, rec["bbox"])
            continue
        boxes.append(Box2D(class_id, x1, y1, x2, y2, score))
    return out


def _box3d_corners(h, w, l, x, y, z, ry) -> np.ndarray:
    # KITTI camera frame: y down, location at the bottom face center
    xs = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * l / 2
    ys = np.array([0, 0, 0, 0, -1, -1, -1, -1]) * h
    zs = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * w / 2
    c, s = math.cos(ry), math.sin(ry)
    R = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return (R @ np.vstack([xs, ys, zs])).T + np.array([x, y, z])


class LabelBoxes(NamedTuple):
    boxes: list[Box2D]
    source: str  # "box2d" or "projected": how the 2D boxes were obtained


def read_kitti_labels(
    text: str,
    class_map: Mapping[str, int] = KITTI_CLASSES,
    source: str = "box2d",
    P2: np.ndarray | None = None,
    image_size: tuple[int, int] = KITTI_IMAGE_SIZE,
) -> LabelBoxes:
    """Boxes from a KITTI label file, tagged with the conversion used.

    ``source="box2d"`` takes the annotated 2D box; ``source="projected"``
    uses the image-clipped hull of the projected 3D box (needs ``P2``).
    Classes absent from ``class_map`` (e.g. DontCare) are skipped.
    """
    if source not in ("box2d", "projected"):
        raise ValueError(f"unknown source {source!r}")
    if source == "projected" and P2 is None:
        raise ValueError("projected boxes need the P2 matrix")
    boxes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tok = raw.split()
        if not tok:
            continue
        if len(tok) < 15:
            raise ParseError(f"expected at least 15 fields, got {len(tok)}", lineno)
        if tok[0] not in class_map:
            continue
        try:
            vals = [float(v) for v in tok[1:]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        score = vals[14] if len(vals) > 14 else 1.0
        if source == "box2d":
            x1, y1, x2, y2 = vals[3:7]
        else:
            h, w, l, x, y, z, ry = vals[7:14]
            pts = _box3d_corners(h, w, l, x, y, z, ry)
            if np.any(pts[:, 2] <= 0.1):
                continue
            uvw = np.hstack([pts, np.ones((8, 1))]) @ np.asarray(P2).T
            u, v = uvw[:, 0] / uvw[:, 2], uvw[:, 1] / uvw[:, 2]
            x1, x2 = np.clip([u.min(), u.max()], 0, image_size[0])
            y1, y2 = np.clip([v.min(), v.max()], 0, image_size[1])
        if x1 < x2 and y1 < y2:
            boxes.append(Box2D(class_map[tok[0]], float(x1), float(y1), float(x2), float(y2), score))
    return LabelBoxes(boxes, source)


def count_classes(items: Iterable, n_classes: int) -> list[int]:
    """Per-class counts of boxes (or bare class ids)."""
    counts = [0] * n_classes
    for it in items:
        k = it.class_id if isinstance(it, Box2D) else int(it)
        if not 0 <= k < n_classes:
            raise UnknownClass(f"class id {k} outside [0, {n_classes})")
        counts[k] += 1
    return counts


# ---------------------------------------------------------------------------
# binary grids


def encode_grid(values: np.ndarray, dtype: str) -> bytes:
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError(f"grid must be (C, H, W), got {values.shape}")
    C, H, W = values.shape
    return HEADER.pack(MAGIC, C, H, W) + np.ascontiguousarray(values, dtype=dtype).tobytes()


def decode_grid(data: bytes, dtype: str) -> np.ndarray:
    if len(data) < HEADER.size:
        raise CorruptHeader(f"file is {len(data)} bytes, shorter than the header")
    magic, C, H, W = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptHeader(f"bad magic {magic!r}")
    itemsize = np.dtype(dtype).itemsize
    expected = C * H * W * itemsize
    if len(data) - HEADER.size != expected:
        raise CorruptHeader(
            f"header says {C}x{H}x{W} ({expected} bytes) but payload is {len(data) - HEADER.size} bytes"
        )
    return np.frombuffer(data, dtype=dtype, offset=HEADER.size).reshape(C, H, W).copy()


def depth_to_png16(depth: np.ndarray) -> np.ndarray:
    """Quantise metres to the ``depth * 256`` uint16 convention (0 = empty)."""
    d = np.nan_to_num(np.asarray(depth, dtype=np.float64), nan=0.0)
    q = np.floor(d * DEPTH_SCALE + 0.5)
    return np.clip(q, 0, 65535).astype(np.uint16)


def write_depth_png(path, depth: np.ndarray) -> None:
    Image.fromarray(depth_to_png16(depth)).save(path, format="PNG")


def read_depth_png(path) -> np.ndarray:
    """Depth in metres with NaN where the PNG holds 0."""
    with Image.open(path) as im:
        q = np.array(im, dtype=np.uint16)
    d = q.astype(np.float64) / DEPTH_SCALE
    d[q == 0] = np.nan
    return d


# ---------------------------------------------------------------------------
# target bundles


@dataclass
class TargetBundle:
    frame_id: str
    depth: SemiDenseDepthTarget
    corners: HeatmapSet
    detection: DetectionTargets
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = (self.depth.height, self.depth.width)
        for name, h in (("corners", self.corners), ("centers", self.detection.center_heatmaps)):
            if (h.height, h.width) != shape:
                raise ValueError(f"{name} grid {(h.height, h.width)} != depth grid {shape}")


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def write_target_bundle(bundle: TargetBundle, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    t = bundle.depth
    write_depth_png(d / "depth.png", t.depth)
    planes = np.stack([t.depth, t.weight, t.provenance.astype(np.float64), t.source.astype(np.float64)])
    (d / "depth_raw.bin").write_bytes(encode_grid(planes, "<f8"))
    (d / "corners.bin").write_bytes(encode_grid(bundle.corners.values, "<f4"))
    (d / "centers.bin").write_bytes(encode_grid(bundle.detection.center_heatmaps.values, "<f4"))
    det = bundle.detection
    _dump_json(
        {
            "indices": det.indices.tolist(),
            "sizes": det.sizes.tolist(),
            "offsets": det.offsets.tolist(),
        },
        d / "detection.json",
    )
    meta = {"tool_version": __version__, **bundle.metadata}
    meta.update(frame_id=bundle.frame_id, stride=t.stride, width=t.width, height=t.height)
    _dump_json(meta, d / "meta.json")
    return d


def read_target_bundle(directory) -> TargetBundle:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
        planes = decode_grid((d / "depth_raw.bin").read_bytes(), "<f8")
        corners = decode_grid((d / "corners.bin").read_bytes(), "<f4")
        centers = decode_grid((d / "centers.bin").read_bytes(), "<f4")
        det = json.loads((d / "detection.json").read_text())
    except OSError as exc:
        raise OSError(f"cannot read bundle {d}: {exc}") from exc
    if planes.shape[0] != 4:
        raise CorruptHeader(f"depth_raw.bin has {planes.shape[0]} planes, expected 4")
    H, W = planes.shape[1:]
    if (meta["height"], meta["width"]) != (H, W) or corners.shape[1:] != (H, W) or centers.shape[1:] != (H, W):
        raise CorruptHeader("grid dimensions disagree between bundle files")
    depth = SemiDenseDepthTarget(
        W,
        H,
        int(meta["stride"]),
        planes[0],
        planes[2].astype(np.int8),
        planes[1],
        planes[3].astype(np.int64),
    )
    detection = DetectionTargets(
        HeatmapSet(centers.astype(np.float64)),
        np.array(det["indices"], dtype=np.int64).reshape(-1, 3),
        np.array(det["sizes"], dtype=np.float64).reshape(-1, 2),
        np.array(det["offsets"], dtype=np.float64).reshape(-1, 2),
    )
    metadata = {k: v for k, v in meta.items() if k not in ("frame_id", "stride", "width", "height")}
    return TargetBundle(meta["frame_id"], depth, HeatmapSet(corners.astype(np.float64)), detection, metadata)


# ---------------------------------------------------------------------------
# dataset layout


@dataclass
class FrameRecord:
    frame_id: str
    image_size: tuple[int, int]
    calib: KittiCalib
    lidar_path: Path
    boxes: list[Box2D]


def list_frames(dataset_dir) -> list[str]:
    """Sorted frame ids found under ``calib/`` or ``velodyne/``."""
    root = Path(dataset_dir)
    ids = {p.stem for p in (root / "calib").glob("*.txt")}
    ids |= {p.stem for p in (root / "velodyne").glob("*.bin")}
    return sorted(ids)


def image_size_for(dataset_dir, frame_id: str, default: tuple[int, int]) -> tuple[int, int]:
    """Dimensions from ``image_2/<id>.png`` if present (header only), else ``default``."""
    path = Path(dataset_dir) / "image_2" / f"{frame_id}.png"
    if path.exists():
        with Image.open(path) as im:
            return im.size
    return default


def load_frame(dataset_dir, frame_id: str, boxes: list[Box2D], default_size=KITTI_IMAGE_SIZE) -> FrameRecord:
    root = Path(dataset_dir)
    size = image_size_for(root, frame_id, default_size)
    calib_path = root / "calib" / f"{frame_id}.txt"
    lidar_path = root / "velodyne" / f"{frame_id}.bin"
    if not calib_path.exists():
        raise FileNotFoundError(f"missing calibration {calib_path}")
    if not lidar_path.exists():
        raise FileNotFoundError(f"missing lidar scan {lidar_path}")
    calib = read_kitti_calib(calib_path.read_text(), size)
    return FrameRecord(frame_id, size, calib, lidar_path, list(boxes))
