"""Depth, heatmap and regression losses with analytic gradients.

Every loss returns its value together with the gradient with respect to
the prediction it consumes, so a hand-written backward pass can chain
through them without an autodiff framework.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from .depth_targets import DimensionMismatch, SemiDenseDepthTarget
from .keypoint_targets import DetectionTargets, HeatmapSet

SQRT2 = math.sqrt(2.0)
PROB_EPS = 1e-6


class ZeroCount(ValueError):
    def __init__(self, class_id: int):
        super().__init__(f"class {class_id} has zero samples; its weight is undefined")
        self.class_id = class_id


class UnknownClass(KeyError):
    pass


@dataclass
class DepthPrediction:
    z: np.ndarray | float
    s: np.ndarray | float  # log of the Laplace scale

    @property
    def sigma(self):
        return np.exp(self.s)


def laplace_depth_loss(pred: DepthPrediction, z_gt):
    """Laplace negative log-likelihood in terms of ``s = log sigma``.

    Returns ``(loss, dL/dz, dL/ds)``, elementwise for array inputs.
    """
    r = np.asarray(pred.z, dtype=np.float64) - np.asarray(z_gt, dtype=np.float64)
    s = np.asarray(pred.s, dtype=np.float64)
    scale = SQRT2 * np.exp(-s)
    loss = scale * np.abs(r) + s
    dz = scale * np.sign(r)
    ds = 1.0 - scale * np.abs(r)
    if loss.ndim == 0:
        return float(loss), float(dz), float(ds)
    return loss, dz, ds


def clamp_probs(p, eps: float = PROB_EPS) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)


def _values(h) -> np.ndarray:
    return h.values if isinstance(h, HeatmapSet) else np.asarray(h, dtype=np.float64)


def focal_heatmap_loss(pred, target, alpha: float = 2.0, beta: float = 4.0):
    """Penalty-reduced pixel-wise focal loss.

    ``pred`` must already lie strictly inside (0, 1). Cells where the target
    equals 1 are positives; the summed loss is normalised by the positive
    count (at least 1). Returns ``(loss, dloss/dpred)``.
    """
    p = _values(pred)
    y = _values(target)
    if p.shape != y.shape:
        raise DimensionMismatch(f"prediction shape {p.shape} != target shape {y.shape}")
    pos = y == 1.0
    n = max(1, int(pos.sum()))

    log_p = np.log(p)
    log_1mp = np.log1p(-p)
    neg_w = (1.0 - y) ** beta
    loss_pos = -((1.0 - p) ** alpha) * log_p
    loss_neg = -neg_w * p ** alpha * log_1mp
    grad_pos = alpha * (1.0 - p) ** (alpha - 1) * log_p - (1.0 - p) ** alpha / p
    grad_neg = -neg_w * (alpha * p ** (alpha - 1) * log_1mp - p ** alpha / (1.0 - p))

    loss = np.where(pos, loss_pos, loss_neg).sum() / n
    grad = np.where(pos, grad_pos, grad_neg) / n
    return float(loss), grad


@dataclass
class ClassWeightTable:
    counts: dict[int, int]
    weights: dict[int, float]

    def weight(self, class_id: int) -> float:
        try:
            return self.weights[int(class_id)]
        except KeyError:
            raise UnknownClass(f"class {class_id} not in weight table") from None

    @property
    def majority(self) -> int:
        return min(self.counts, key=lambda k: (-self.counts[k], k))

    @classmethod
    def uniform(cls, class_ids) -> ClassWeightTable:
        return cls({int(k): 0 for k in class_ids}, {int(k): 1.0 for k in class_ids})


def class_weights(counts: Sequence[int] | Mapping[int, int]) -> ClassWeightTable:
    """Per-class weights ``sqrt(max_count / count)``; the majority class gets 1."""
    if isinstance(counts, Mapping):
        items = {int(k): int(v) for k, v in counts.items()}
    else:
        items = {k: int(v) for k, v in enumerate(counts)}
    if not items:
        raise ValueError("need at least one class")
    for k, v in sorted(items.items()):
        if v < 0:
            raise ValueError(f"class {k} has negative count {v}")
        if v == 0:
            raise ZeroCount(k)
    s_max = max(items.values())
    weights = {k: 1.0 if v == s_max else math.sqrt(s_max / v) for k, v in items.items()}
    return ClassWeightTable(items, weights)


def apply_class_adjustment(per_target_losses, table: ClassWeightTable) -> float:
    """Class-weighted mean of ``(class_id, loss)`` pairs; 0 for no targets."""
    num = 0.0
    den = 0.0
    for class_id, loss in per_target_losses:
        w = table.weight(class_id)
        num += w * loss
        den += w
    return num / den if den > 0 else 0.0


@dataclass
class Lambdas:
    depth: float = 1.0
    corner: float = 1.0
    center: float = 1.0
    size: float = 1.0
    offset: float = 1.0

    @classmethod
    def depth_only(cls) -> Lambdas:
        return cls(1.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def detection_only(cls) -> Lambdas:
        return cls(0.0, 1.0, 1.0, 1.0, 1.0)


@dataclass
class LossBreakdown:
    depth: float = 0.0
    corner_focal: float = 0.0
    center_focal: float = 0.0
    size: float = 0.0
    offset: float = 0.0
    total: float = 0.0
    n_depth_cells: int = 0
    n_positives: int = 0

    TERMS = ("depth", "corner_focal", "center_focal", "size", "offset", "total")

    def as_row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def mean(items: Sequence[LossBreakdown]) -> LossBreakdown:
        if not items:
            return LossBreakdown()
        out = LossBreakdown()
        for name in LossBreakdown.TERMS:
            setattr(out, name, float(np.mean([getattr(b, name) for b in items])))
        out.n_depth_cells = sum(b.n_depth_cells for b in items)
        out.n_positives = sum(b.n_positives for b in items)
        return out


@dataclass
class FrameTargets:
    """All supervision for one frame on a common (H, W) grid."""

    depth: SemiDenseDepthTarget
    corners: HeatmapSet
    detection: DetectionTargets
    cell_classes: np.ndarray  # (H, W), -1 outside every box


@dataclass
class FramePredictions:
    """Network outputs on the target grid.

    ``corners`` and ``centers`` are probabilities; ``size`` and ``offset``
    are (2, H, W) regression maps and may be omitted.
    """

    z: np.ndarray
    s: np.ndarray
    corners: np.ndarray
    centers: np.ndarray
    size: np.ndarray | None = None
    offset: np.ndarray | None = None


def depth_cell_classes(target: SemiDenseDepthTarget, cell_classes: np.ndarray) -> np.ndarray:
    """Class of every supervised cell: its own box, else its seed's box, else -1."""
    classes = np.asarray(cell_classes)
    own = classes.copy()
    src = target.source
    has_src = src >= 0
    fallback = np.full_like(own, -1)
    fallback[has_src] = classes.ravel()[src[has_src]]
    return np.where(own >= 0, own, fallback)


def _class_w(classes: np.ndarray, table: ClassWeightTable | None) -> np.ndarray:
    if table is None:
        return np.ones(classes.shape)
    return np.array([1.0 if c < 0 else table.weight(c) for c in classes.ravel()]).reshape(classes.shape)


def _l1_at_positives(pred, target_vals, det: DetectionTargets, w_cls, denom):
    rows, cols = det.indices[:, 1], det.indices[:, 2]
    diff = pred[:, rows, cols].T - target_vals  # (N, 2)
    per_target = np.abs(diff).sum(axis=1)
    loss = float((w_cls * per_target).sum() / denom)
    grad = np.zeros_like(pred)
    g = np.sign(diff) * (w_cls / denom)[:, None]
    np.add.at(grad, (0, rows, cols), g[:, 0])
    np.add.at(grad, (1, rows, cols), g[:, 1])
    return loss, grad


def combined_loss_and_grad(
    targets: FrameTargets,
    preds: FramePredictions,
    table: ClassWeightTable | None = None,
    lambdas: Lambdas | None = None,
    alpha: float = 2.0,
    beta: float = 4.0,
) -> tuple[LossBreakdown, FramePredictions]:
    """Total pre-training loss and its gradient w.r.t. every prediction map.

    The returned gradients already include the ``lambdas`` scaling.
    """
    lam = lambdas or Lambdas()
    d = targets.depth
    shape = (d.height, d.width)
    if preds.z.shape != shape or preds.s.shape != shape:
        raise DimensionMismatch(f"depth predictions {preds.z.shape} vs target grid {shape}")
    out = LossBreakdown()
    grads = FramePredictions(
        np.zeros(shape),
        np.zeros(shape),
        np.zeros_like(preds.corners),
        np.zeros_like(preds.centers),
        None if preds.size is None else np.zeros_like(preds.size),
        None if preds.offset is None else np.zeros_like(preds.offset),
    )

    sup = d.supervised
    out.n_depth_cells = int(sup.sum())
    if out.n_depth_cells:
        classes = depth_cell_classes(d, targets.cell_classes)[sup]
        w = _class_w(classes, table) * d.weight[sup]
        cw = _class_w(classes, table)
        denom = cw.sum()
        loss, dz, ds = laplace_depth_loss(DepthPrediction(preds.z[sup], preds.s[sup]), d.depth[sup])
        out.depth = float((w * loss).sum() / denom)
        grads.z[sup] = lam.depth * w * dz / denom
        grads.s[sup] = lam.depth * w * ds / denom

    out.corner_focal, g = focal_heatmap_loss(preds.corners, targets.corners, alpha, beta)
    grads.corners = lam.corner * g
    out.center_focal, g = focal_heatmap_loss(preds.centers, targets.detection.center_heatmaps, alpha, beta)
    grads.centers = lam.center * g

    det = targets.detection
    out.n_positives = len(det)
    if len(det):
        w_cls = _class_w(det.indices[:, 0], table)
        denom = w_cls.sum()
        if preds.size is not None:
            out.size, g = _l1_at_positives(preds.size, det.sizes, det, w_cls, denom)
            grads.size = lam.size * g
        if preds.offset is not None:
            out.offset, g = _l1_at_positives(preds.offset, det.offsets, det, w_cls, denom)
            grads.offset = lam.offset * g

    out.total = (
        lam.depth * out.depth
        + lam.corner * out.corner_focal
        + lam.center * out.center_focal
        + lam.size * out.size
        + lam.offset * out.offset
    )
    return out, grads


def combined_loss(targets, preds, table=None, lambdas=None, alpha=2.0, beta=4.0) -> LossBreakdown:
    return combined_loss_and_grad(targets, preds, table, lambdas, alpha, beta)[0]
