"""Pinhole camera model, rigid transforms and lidar-to-grid projection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

MIN_DEPTH = 1e-6


class NonPositiveDepth(ValueError):
    """Raised when a point lies behind or on the camera plane."""


class LidarPoint(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    image_w: int
    image_h: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.image_w and 0 <= self.cy < self.image_h):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.image_w}x{self.image_h}"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def grid_shape(self, stride: int) -> tuple[int, int]:
        """(height, width) of the target grid at ``stride`` pixels per cell."""
        return math.ceil(self.image_h / stride), math.ceil(self.image_w / stride)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), rtol=0, atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> RigidTransform:
        """Build from a 3x4 or 4x4 ``[R | t]`` matrix."""
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array of points.

        Written as explicit per-row sums rather than a matmul so each point
        gets the same rounding as a scalar evaluation, whatever N is.
        """
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        R, t = self.rotation, self.translation
        x, y, z = p[:, 0], p[:, 1], p[:, 2]
        return np.column_stack([R[i, 0] * x + R[i, 1] * y + R[i, 2] * z + t[i] for i in range(3)])


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Project a near-orthonormal 3x3 matrix onto SO(3)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def transform_point(p, T: RigidTransform) -> np.ndarray:
    return T.rotation @ np.asarray(p, dtype=np.float64).reshape(3) + T.translation


def project_point(p, cam: CameraModel) -> tuple[float, float, float]:
    """Project a camera-frame point to ``(u, v, depth)``."""
    x, y, z = (float(c) for c in np.asarray(p, dtype=np.float64).reshape(3))
    if not all(math.isfinite(c) for c in (x, y, z)):
        raise ValueError("point has non-finite coordinates")
    if z <= MIN_DEPTH:
        raise NonPositiveDepth(f"camera-frame depth {z} is not positive")
    return cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, z


def backproject_pixel(u: float, v: float, depth: float, cam: CameraModel) -> np.ndarray:
    """Inverse of :func:`project_point` for a pixel with known camera-frame depth."""
    if depth <= MIN_DEPTH:
        raise NonPositiveDepth(f"depth {depth} is not positive")
    return np.array([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth])


@dataclass
class SparseDepthMap:
    """Grid of optional depths; absent cells hold NaN."""

    width: int
    height: int
    stride: int
    depth: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.shape != (self.height, self.width):
            raise ValueError(
                f"depth grid shape {self.depth.shape} != ({self.height}, {self.width})"
            )
        present = self.depth[~np.isnan(self.depth)]
        if np.any(present <= 0) or np.any(~np.isfinite(present)):
            raise ValueError("present depths must be positive and finite")

    @classmethod
    def empty(cls, width: int, height: int, stride: int) -> SparseDepthMap:
        return cls(width, height, stride, np.full((height, width), np.nan))

    @classmethod
    def for_camera(cls, cam: CameraModel, stride: int) -> SparseDepthMap:
        h, w = cam.grid_shape(stride)
        return cls.empty(w, h, stride)

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.depth)

    def count(self) -> int:
        return int(self.present.sum())

    def same_grid(self, other) -> bool:
        return (self.width, self.height) == (other.width, other.height)


def lidar_to_sparse_depth(points, T: RigidTransform, cam: CameraModel, stride: int) -> SparseDepthMap:
    """Project lidar returns into a stride-aligned depth grid.

    ``points`` is anything convertible to an (N, >=3) float array, e.g. a
    list of :class:`LidarPoint` or the raw (N, 4) velodyne array. Points that
    fall behind the camera or outside the image are dropped; when several
    land in one cell the nearest depth is kept.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    out = SparseDepthMap.for_camera(cam, stride)
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return out
    pts = pts.reshape(len(pts), -1)[:, :3]
    pts = pts[np.all(np.isfinite(pts), axis=1)]

    cam_pts = T.apply(pts)
    z = cam_pts[:, 2]
    front = z > MIN_DEPTH
    cam_pts, z = cam_pts[front], z[front]
    u = cam.fx * cam_pts[:, 0] / z + cam.cx
    v = cam.fy * cam_pts[:, 1] / z + cam.cy
    inside = (u >= 0) & (u < cam.image_w) & (v >= 0) & (v < cam.image_h)
    u, v, z = u[inside], v[inside], z[inside]

    col = np.floor(u / stride).astype(np.intp)
    row = np.floor(v / stride).astype(np.intp)
    grid = np.full((out.height, out.width), np.inf)
    np.minimum.at(grid, (row, col), z)
    grid[np.isinf(grid)] = np.nan
    out.depth = grid
    return out
