"""Region filtering and uncertainty-guided semi-dense depth propagation."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .geometry import CameraModel, RigidTransform, SparseDepthMap, lidar_to_sparse_depth

SIGMA_LO = 0.3
SIGMA_HI = 0.7
PATCH_LO = 5
PATCH_HI = 3
MAX_DEPTH = 60.0


class DimensionMismatch(ValueError):
    pass


class Provenance(enum.IntEnum):
    NONE = 0
    ORIGINAL = 1
    PROPAGATED = 2


@dataclass(frozen=True)
class Box2D:
    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float = 1.0

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def scaled(self, factor: float) -> Box2D:
        return Box2D(
            self.class_id,
            self.x_min * factor,
            self.y_min * factor,
            self.x_max * factor,
            self.y_max * factor,
            self.score,
        )


@dataclass
class UncertaintyMap:
    width: int
    height: int
    sigma: np.ndarray

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.sigma.shape != (self.height, self.width):
            raise DimensionMismatch(f"sigma shape {self.sigma.shape} != ({self.height}, {self.width})")
        if not np.all(np.isfinite(self.sigma)) or np.any(self.sigma <= 0):
            raise ValueError("sigma values must be positive and finite")

    @classmethod
    def constant(cls, width: int, height: int, value: float) -> UncertaintyMap:
        return cls(width, height, np.full((height, width), float(value)))


@dataclass
class SemiDenseDepthTarget:
    """Depth supervision after propagation.

    ``source`` holds the row-major index of the seed cell that supplied each
    supervised depth (-1 where unsupervised).
    """

    width: int
    height: int
    stride: int
    depth: np.ndarray
    provenance: np.ndarray
    weight: np.ndarray
    source: np.ndarray

    def __post_init__(self):
        shape = (self.height, self.width)
        for name in ("depth", "provenance", "weight", "source"):
            if np.shape(getattr(self, name)) != shape:
                raise DimensionMismatch(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    @classmethod
    def empty(cls, width: int, height: int, stride: int) -> SemiDenseDepthTarget:
        return cls(
            width,
            height,
            stride,
            np.full((height, width), np.nan),
            np.zeros((height, width), dtype=np.int8),
            np.zeros((height, width)),
            np.full((height, width), -1, dtype=np.int64),
        )

    @property
    def supervised(self) -> np.ndarray:
        return self.provenance != Provenance.NONE

    def count(self) -> int:
        return int(self.supervised.sum())

    def count_original(self) -> int:
        return int((self.provenance == Provenance.ORIGINAL).sum())


def cell_centers(width: int, height: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates of cell centers as (x[W], y[H])."""
    return stride * (np.arange(width) + 0.5), stride * (np.arange(height) + 0.5)


def box_mask(boxes, width: int, height: int, stride: int) -> np.ndarray:
    """Cells whose center pixel lies inside at least one box (closed bounds)."""
    xs, ys = cell_centers(width, height, stride)
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        mask |= ((ys >= b.y_min) & (ys <= b.y_max))[:, None] & ((xs >= b.x_min) & (xs <= b.x_max))[None, :]
    return mask


def cell_class_map(boxes, width: int, height: int, stride: int) -> np.ndarray:
    """Class of the smallest box covering each cell center; -1 if none.

    Ties in area go to the lower box index.
    """
    xs, ys = cell_centers(width, height, stride)
    out = np.full((height, width), -1, dtype=np.int64)
    best = np.full((height, width), np.inf)
    for b in boxes:
        inside = ((ys >= b.y_min) & (ys <= b.y_max))[:, None] & ((xs >= b.x_min) & (xs <= b.x_max))[None, :]
        win = inside & (b.area < best)
        out[win] = b.class_id
        best[win] = b.area
    return out


def region_filter(sparse: SparseDepthMap, boxes, max_depth: float = MAX_DEPTH) -> SparseDepthMap:
    """Keep only cells inside a box and nearer than ``max_depth``."""
    keep = box_mask(boxes, sparse.width, sparse.height, sparse.stride)
    with np.errstate(invalid="ignore"):
        keep &= sparse.depth < max_depth
    return SparseDepthMap(
        sparse.width, sparse.height, sparse.stride, np.where(keep, sparse.depth, np.nan)
    )


def patch_size(sigma: float, sigma_lo: float = SIGMA_LO, sigma_hi: float = SIGMA_HI,
               patch_lo: int = PATCH_LO, patch_hi: int = PATCH_HI) -> int:
    """Side of the square patch a seed with uncertainty ``sigma`` writes to."""
    if sigma < sigma_lo:
        return patch_lo
    if sigma <= sigma_hi:
        return patch_hi
    return 1


def propagate(
    filtered: SparseDepthMap,
    sigma: UncertaintyMap,
    propagated_weight: float = 1.0,
    sigma_lo: float = SIGMA_LO,
    sigma_hi: float = SIGMA_HI,
    patch_lo: int = PATCH_LO,
    patch_hi: int = PATCH_HI,
) -> SemiDenseDepthTarget:
    """Spread reliable seed depths into their neighbourhood.

    Seeds below ``sigma_lo`` stamp a ``patch_lo`` square, seeds in
    ``[sigma_lo, sigma_hi]`` a ``patch_hi`` square, the rest only themselves.
    Seed cells always keep their own depth; overlapping propagated writes go
    to the lowest-sigma seed, then the lowest row-major seed index.
    """
    if not filtered.same_grid(sigma):
        raise DimensionMismatch(
            f"depth grid {filtered.width}x{filtered.height} vs "
            f"sigma grid {sigma.width}x{sigma.height}"
        )
    if not propagated_weight > 0:
        raise ValueError("propagated_weight must be positive")
    H, W = filtered.height, filtered.width
    out = SemiDenseDepthTarget.empty(W, H, filtered.stride)

    seed_idx = np.flatnonzero(filtered.present.ravel())
    if seed_idx.size == 0:
        return out
    seed_sigma = sigma.sigma.ravel()[seed_idx]
    # Stamp worst seeds first so better ones overwrite them.
    order = np.lexsort((seed_idx, seed_sigma))[::-1]
    flat_depth = filtered.depth.ravel()
    for k in order:
        idx = int(seed_idx[k])
        r, c = divmod(idx, W)
        half = patch_size(seed_sigma[k], sigma_lo, sigma_hi, patch_lo, patch_hi) // 2
        if half == 0:
            continue
        rs, re = max(r - half, 0), min(r + half + 1, H)
        cs, ce = max(c - half, 0), min(c + half + 1, W)
        out.depth[rs:re, cs:ce] = flat_depth[idx]
        out.source[rs:re, cs:ce] = idx
        out.provenance[rs:re, cs:ce] = Provenance.PROPAGATED
        out.weight[rs:re, cs:ce] = propagated_weight

    rows, cols = np.divmod(seed_idx, W)
    out.depth[rows, cols] = flat_depth[seed_idx]
    out.source[rows, cols] = seed_idx
    out.provenance[rows, cols] = Provenance.ORIGINAL
    out.weight[rows, cols] = 1.0
    return out


def build_depth_target(
    points,
    T: RigidTransform,
    cam: CameraModel,
    boxes,
    sigma: UncertaintyMap | float,
    stride: int = 4,
    max_depth: float = MAX_DEPTH,
    **propagate_kwargs,
) -> SemiDenseDepthTarget:
    """Lidar points to semi-dense depth target in one call."""
    sparse = lidar_to_sparse_depth(points, T, cam, stride)
    if not isinstance(sigma, UncertaintyMap):
        sigma = UncertaintyMap.constant(sparse.width, sparse.height, sigma)
    return propagate(region_filter(sparse, boxes, max_depth), sigma, **propagate_kwargs)
