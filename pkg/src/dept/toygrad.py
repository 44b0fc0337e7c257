"""A per-cell MLP trained with hand-written backprop on synthetic scenes.

The network sees one feature vector per grid cell and predicts depth,
log-uncertainty and one logit per heatmap channel (4 corner channels
followed by one center channel per class). Depth targets are rebuilt every
step from the network's own uncertainty, so the whole target pipeline runs
inside the training loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .depth_targets import (
    Box2D,
    DimensionMismatch,
    UncertaintyMap,
    cell_class_map,
    propagate,
    region_filter,
)
from .geometry import SparseDepthMap
from .keypoint_targets import corner_heatmaps, detection_targets
from .losses import (
    PROB_EPS,
    ClassWeightTable,
    FramePredictions,
    FrameTargets,
    Lambdas,
    LossBreakdown,
    class_weights,
    combined_loss_and_grad,
)

log = logging.getLogger(__name__)

N_FEATURES = 8
N_HIDDEN = 32
N_CORNERS = 4
DEPTH_RANGE = (4.0, 12.0)
SHADING_SCALE = 10.0
LIDAR_NOISE = 0.05

MODES = ("depth_only", "detection_only", "combined")


class DivergenceDetected(RuntimeError):
    pass


def n_params(n_features: int, n_hidden: int, n_out: int) -> int:
    return n_features * n_hidden + n_hidden + n_hidden * n_out + n_out


@dataclass
class ToyNet:
    n_features: int
    n_hidden: int
    n_heatmaps: int
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        expected = n_params(self.n_features, self.n_hidden, self.n_out)
        if self.params.shape != (expected,):
            raise DimensionMismatch(f"expected {expected} parameters, got {self.params.shape}")

    @property
    def n_out(self) -> int:
        return 2 + self.n_heatmaps

    @classmethod
    def zeros(cls, n_heatmaps: int, n_features: int = N_FEATURES, n_hidden: int = N_HIDDEN) -> ToyNet:
        return cls(n_features, n_hidden, n_heatmaps, np.zeros(n_params(n_features, n_hidden, 2 + n_heatmaps)))

    @classmethod
    def init(cls, n_heatmaps: int, seed: int, n_features: int = N_FEATURES, n_hidden: int = N_HIDDEN) -> ToyNet:
        rng = np.random.default_rng(seed)
        net = cls.zeros(n_heatmaps, n_features, n_hidden)
        W1, _, W2, b2 = net.blocks()
        W1[:] = rng.normal(0.0, 1.0 / np.sqrt(n_features), W1.shape)
        W2[:] = rng.normal(0.0, 0.1 / np.sqrt(n_hidden), W2.shape)
        # start heatmaps near the background prior
        b2[0] = sum(DEPTH_RANGE) / 2
        b2[2:] = -2.0
        return net

    def copy(self) -> ToyNet:
        return ToyNet(self.n_features, self.n_hidden, self.n_heatmaps, self.params.copy())

    def block_slices(self) -> dict[str, slice]:
        F, Hd, O = self.n_features, self.n_hidden, self.n_out
        sizes = {"W1": F * Hd, "b1": Hd, "W2": Hd * O, "b2": O}
        out, start = {}, 0
        for name, size in sizes.items():
            out[name] = slice(start, start + size)
            start += size
        return out

    def blocks(self, vec: np.ndarray | None = None) -> tuple[np.ndarray, ...]:
        """(W1, b1, W2, b2) as writable views into ``vec`` (default: params)."""
        vec = self.params if vec is None else vec
        F, Hd, O = self.n_features, self.n_hidden, self.n_out
        sl = self.block_slices()
        return (
            vec[sl["W1"]].reshape(F, Hd),
            vec[sl["b1"]],
            vec[sl["W2"]].reshape(Hd, O),
            vec[sl["b2"]],
        )


@dataclass
class ForwardCache:
    x: np.ndarray  # (N, F)
    hidden: np.ndarray  # (N, Hd)
    probs: np.ndarray  # (N, C) unclamped sigmoid
    shape: tuple[int, int]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def forward(net: ToyNet, features: np.ndarray):
    """Run the net on an (H, W, F) feature grid.

    Returns ``(z, s, heat, cache)`` with ``z`` and ``s`` of shape (H, W) and
    ``heat`` the (C, H, W) sigmoid probabilities.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[2] != net.n_features:
        raise DimensionMismatch(
            f"features {features.shape} do not match a {net.n_features}-input net"
        )
    H, W, F = features.shape
    W1, b1, W2, b2 = net.blocks()
    x = features.reshape(H * W, F)
    hidden = np.tanh(x @ W1 + b1)
    out = hidden @ W2 + b2
    probs = _sigmoid(out[:, 2:])
    z = out[:, 0].reshape(H, W)
    s = out[:, 1].reshape(H, W)
    heat = probs.T.reshape(net.n_heatmaps, H, W)
    return z, s, heat, ForwardCache(x, hidden, probs, (H, W))


def backward(net: ToyNet, cache: ForwardCache, grads: FramePredictions) -> np.ndarray:
    """Chain prediction-map gradients back to a flat parameter gradient.

    Heatmap gradients are taken w.r.t. the clamped probabilities, so cells
    whose probability sits on the clamp contribute nothing.
    """
    H, W = cache.shape
    C = net.n_heatmaps
    heat_grad = np.concatenate([grads.corners, grads.centers], axis=0).reshape(C, H * W).T
    p = cache.probs
    live = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    d_out = np.empty((H * W, net.n_out))
    d_out[:, 0] = grads.z.ravel()
    d_out[:, 1] = grads.s.ravel()
    d_out[:, 2:] = heat_grad * p * (1.0 - p) * live

    _, _, W2, _ = net.blocks()
    g = np.zeros_like(net.params)
    gW1, gb1, gW2, gb2 = net.blocks(g)
    gW2[:] = cache.hidden.T @ d_out
    gb2[:] = d_out.sum(axis=0)
    d_pre = (d_out @ W2.T) * (1.0 - cache.hidden ** 2)
    gW1[:] = cache.x.T @ d_pre
    gb1[:] = d_pre.sum(axis=0)
    return g


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class Rect:
    class_id: int
    x0: int
    y0: int
    x1: int  # exclusive
    y1: int  # exclusive
    depth: float

    def box(self) -> Box2D:
        return Box2D(self.class_id, float(self.x0), float(self.y0), float(self.x1), float(self.y1))

    @property
    def corners(self):
        return (self.x0, self.y0), (self.x1, self.y0), (self.x1, self.y1), (self.x0, self.y1)


@dataclass
class SyntheticScene:
    width: int
    height: int
    n_classes: int
    rects: list[Rect]
    features: np.ndarray  # (H, W, N_FEATURES)
    samples: list[tuple[int, int, float]]  # (row, col, noisy depth)

    @property
    def boxes(self) -> list[Box2D]:
        return [r.box() for r in self.rects]

    def sparse_depth(self) -> SparseDepthMap:
        out = SparseDepthMap.empty(self.width, self.height, 1)
        for row, col, d in self.samples:
            cur = out.depth[row, col]
            if np.isnan(cur) or d < cur:
                out.depth[row, col] = d
        return out

    def true_depth(self) -> np.ndarray:
        depth = np.full((self.height, self.width), np.nan)
        for r in self.rects:
            depth[r.y0:r.y1, r.x0:r.x1] = r.depth
        return depth


def _scene_features(width, height, n_classes, rects, rng, shading_noise):
    ys, xs = np.mgrid[0:height, 0:width] + 0.5
    feats = np.zeros((height, width, N_FEATURES))
    feats[..., 0] = xs / width
    feats[..., 1] = ys / height
    sdist = np.full((height, width), -np.inf)
    rel_x = np.zeros((height, width))
    rel_y = np.zeros((height, width))
    best = np.full((height, width), np.inf)
    for r in rects:
        # signed distance to the rectangle boundary, positive inside
        dx = np.minimum(xs - r.x0, r.x1 - xs)
        dy = np.minimum(ys - r.y0, r.y1 - ys)
        inside = (dx > 0) & (dy > 0)
        out_dx = np.maximum(np.maximum(r.x0 - xs, xs - r.x1), 0.0)
        out_dy = np.maximum(np.maximum(r.y0 - ys, ys - r.y1), 0.0)
        d = np.where(inside, np.minimum(dx, dy), -np.hypot(out_dx, out_dy))
        sdist = np.maximum(sdist, d)
        cx, cy = (r.x0 + r.x1) / 2, (r.y0 + r.y1) / 2
        hw, hh = (r.x1 - r.x0) / 2, (r.y1 - r.y0) / 2
        dist_c = np.hypot((xs - cx) / hw, (ys - cy) / hh)
        near = dist_c < best
        best = np.where(near, dist_c, best)
        rel_x = np.where(near, np.clip((xs - cx) / hw, -2, 2), rel_x)
        rel_y = np.where(near, np.clip((ys - cy) / hh, -2, 2), rel_y)
        feats[inside, 3] = 1.0
        feats[inside, 4] = r.depth / SHADING_SCALE
        feats[inside, 7] = (r.class_id + 1) / n_classes
    feats[..., 2] = np.clip(sdist / 4.0, -1.0, 1.0)
    feats[..., 4] += rng.normal(0.0, shading_noise, (height, width))
    feats[..., 5] = rel_x
    feats[..., 6] = rel_y
    return feats


def make_scene(
    rng: np.random.Generator,
    width: int = 16,
    height: int = 16,
    n_classes: int = 2,
    n_rects: int | None = None,
    depth: float | None = None,
    samples_per_rect: int = 8,
    shading_noise: float = 0.01,
    rect_size: tuple[int, int] | None = None,
) -> SyntheticScene:
    """Place non-overlapping rectangles and sample noisy lidar-like depths."""
    if n_rects is None:
        n_rects = int(rng.integers(1, 3))
    rects: list[Rect] = []
    occupied = np.zeros((height, width), dtype=bool)
    for _ in range(200):
        if len(rects) == n_rects:
            break
        lo, hi = rect_size or (min(4, min(width, height) // 2), max(5, min(width, height) // 2))
        w = int(rng.integers(lo, hi))
        h = int(rng.integers(lo, hi))
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        # keep a one-cell gap so propagated patches rarely cross objects
        y_lo, y_hi = max(y0 - 1, 0), min(y0 + h + 1, height)
        x_lo, x_hi = max(x0 - 1, 0), min(x0 + w + 1, width)
        if occupied[y_lo:y_hi, x_lo:x_hi].any():
            continue
        occupied[y0:y0 + h, x0:x0 + w] = True
        d = float(rng.uniform(*DEPTH_RANGE)) if depth is None else float(depth)
        rects.append(Rect(int(rng.integers(0, n_classes)), x0, y0, x0 + w, y0 + h, d))
    if not rects:
        raise RuntimeError("could not place any rectangle")

    samples = []
    for r in rects:
        cells = [(y, x) for y in range(r.y0, r.y1) for x in range(r.x0, r.x1)]
        pick = rng.choice(len(cells), size=min(samples_per_rect, len(cells)), replace=False)
        for i in sorted(pick):
            y, x = cells[i]
            samples.append((y, x, max(r.depth + float(rng.normal(0.0, LIDAR_NOISE)), 1e-3)))
    feats = _scene_features(width, height, n_classes, rects, rng, shading_noise)
    return SyntheticScene(width, height, n_classes, rects, feats, samples)


def make_scenes(n: int, seed: int, **kwargs) -> list[SyntheticScene]:
    rng = np.random.default_rng(seed)
    return [make_scene(rng, **kwargs) for _ in range(n)]


# ---------------------------------------------------------------------------
# targets, loss and training


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.1
    seed: int = 0
    batch: int = 1
    propagated_weight: float = 1.0
    lambdas: Lambdas = field(default_factory=Lambdas)
    class_adjust: bool = True
    lr_decay: float = 0.98  # per-epoch multiplicative factor

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


def scene_targets(
    scene: SyntheticScene,
    sigma: np.ndarray | None,
    propagated_weight: float = 1.0,
) -> FrameTargets:
    """Supervision for one scene; ``sigma`` is the current uncertainty map.

    With ``sigma=None`` no propagation happens (every seed is kept alone).
    """
    boxes = scene.boxes
    W, H = scene.width, scene.height
    filtered = region_filter(scene.sparse_depth(), boxes)
    if sigma is None:
        sig_map = UncertaintyMap.constant(W, H, 1e9)
    else:
        sig_map = UncertaintyMap(W, H, sigma)
    depth = propagate(filtered, sig_map, propagated_weight=propagated_weight)
    return FrameTargets(
        depth,
        corner_heatmaps(boxes, 1, W, H),
        detection_targets(boxes, scene.n_classes, 1, W, H),
        cell_class_map(boxes, W, H, 1),
    )


def frame_loss_and_grad(
    net: ToyNet,
    features: np.ndarray,
    targets: FrameTargets,
    lambdas: Lambdas | None = None,
    table: ClassWeightTable | None = None,
) -> tuple[LossBreakdown, np.ndarray]:
    z, s, heat, cache = forward(net, features)
    preds = FramePredictions(
        z,
        s,
        np.clip(heat[:N_CORNERS], PROB_EPS, 1 - PROB_EPS),
        np.clip(heat[N_CORNERS:], PROB_EPS, 1 - PROB_EPS),
    )
    breakdown, grads = combined_loss_and_grad(targets, preds, table, lambdas)
    return breakdown, backward(net, cache, grads)


def mode_lambdas(mode: str, lambdas: Lambdas) -> Lambdas:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "depth_only":
        return Lambdas(lambdas.depth, 0.0, 0.0, 0.0, 0.0)
    if mode == "detection_only":
        return Lambdas(0.0, lambdas.corner, lambdas.center, lambdas.size, lambdas.offset)
    return lambdas


def scene_class_table(scenes: Sequence[SyntheticScene]) -> ClassWeightTable | None:
    counts: dict[int, int] = {}
    for sc in scenes:
        for r in sc.rects:
            counts[r.class_id] = counts.get(r.class_id, 0) + 1
    return class_weights(counts) if counts else None


def train(
    net: ToyNet,
    scenes: Sequence[SyntheticScene],
    config: TrainConfig,
    mode: str = "combined",
    on_step: Callable[[FrameTargets], None] | None = None,
) -> list[LossBreakdown]:
    """Plain SGD over ``scenes``; updates ``net`` in place.

    Returns one loss breakdown per epoch, the mean over that epoch's frames
    evaluated before each update. Detection terms are always reported; the
    mode only decides which terms drive the update.
    """
    lam = mode_lambdas(mode, config.lambdas)
    uses_depth = lam.depth > 0
    table = scene_class_table(scenes) if config.class_adjust else None
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(scenes))
        frames = []
        for start in range(0, len(order), config.batch):
            grad = np.zeros_like(net.params)
            batch = order[start:start + config.batch]
            for i in batch:
                scene = scenes[i]
                feats = scene.features[..., : net.n_features]
                sigma = None
                if uses_depth:
                    _, s, _, _ = forward(net, feats)
                    with np.errstate(over="ignore"):
                        sigma = np.exp(s)
                    if not np.all(np.isfinite(sigma)):
                        raise DivergenceDetected(f"non-finite uncertainty at epoch {epoch}")
                targets = scene_targets(scene, sigma, config.propagated_weight)
                if on_step is not None:
                    on_step(targets)
                breakdown, g = frame_loss_and_grad(net, feats, targets, lam, table)
                if not np.isfinite(breakdown.total):
                    raise DivergenceDetected(f"non-finite loss at epoch {epoch}")
                frames.append(breakdown)
                grad += g
            lr = config.learning_rate * config.lr_decay ** epoch
            net.params -= lr * grad / len(batch)
            if not np.all(np.isfinite(net.params)):
                raise DivergenceDetected(f"non-finite parameters at epoch {epoch}")
        history.append(LossBreakdown.mean(frames))
        log.debug("epoch %d total %.5f depth %.5f", epoch, history[-1].total, history[-1].depth)
    return history


def depth_mae(net: ToyNet, scene: SyntheticScene, targets: FrameTargets) -> float:
    z, _, _, _ = forward(net, scene.features[..., : net.n_features])
    sup = targets.depth.supervised
    if not sup.any():
        return 0.0
    return float(np.abs(z[sup] - targets.depth.depth[sup]).mean())


@dataclass
class TransferResult:
    pretrained: list[LossBreakdown]
    scratch: list[LossBreakdown]

    def early_depth(self, epochs: int = 5) -> tuple[float, float]:
        """Mean depth loss over the first ``epochs`` fine-tuning epochs."""
        return (
            float(np.mean([b.depth for b in self.pretrained[:epochs]])),
            float(np.mean([b.depth for b in self.scratch[:epochs]])),
        )


def transfer_experiment(
    scenes_pre: Sequence[SyntheticScene],
    scenes_fine: Sequence[SyntheticScene],
    config: TrainConfig,
    pre_epochs: int,
    n_heatmaps: int | None = None,
) -> TransferResult:
    """Fine-tune a depth-pretrained net and a fresh one on the same data.

    Both nets share the initial parameters and the fine-tuning data order,
    so with ``pre_epochs=0`` the two curves coincide exactly.
    """
    if n_heatmaps is None:
        n_heatmaps = N_CORNERS + scenes_fine[0].n_classes
    base = ToyNet.init(n_heatmaps, config.seed)
    pre = base.copy()
    if pre_epochs > 0:
        pre_cfg = TrainConfig(
            pre_epochs, config.learning_rate, config.seed + 1, config.batch,
            config.propagated_weight, config.lambdas, config.class_adjust,
        )
        train(pre, scenes_pre, pre_cfg, "depth_only")
    scratch = base.copy()
    return TransferResult(
        train(pre, scenes_fine, config, "combined"),
        train(scratch, scenes_fine, config, "combined"),
    )
