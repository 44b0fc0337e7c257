"""Central finite-difference checks for every analytic gradient in the package."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .keypoint_targets import Keypoint, render_keypoints
from .losses import DepthPrediction, Lambdas, ClassWeightTable, focal_heatmap_loss, laplace_depth_loss
from .toygrad import ToyNet, forward, frame_loss_and_grad, make_scene, scene_targets

STEP = 1e-5
TOLERANCE = 1e-4
REL_FLOOR = 1e-5  # above central-difference roundoff (eps * |loss| / h)


@dataclass
class CheckResult:
    name: str
    n_checked: int
    worst: float

    @property
    def passed(self) -> bool:
        return self.worst <= TOLERANCE


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` at every entry of ``x`` (restored after)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_laplace(rng: np.random.Generator, n: int = 100, perturb: float = 0.0) -> list[CheckResult]:
    z_gt = rng.uniform(1.0, 60.0, n)
    r = rng.uniform(1e-3, 5.0, n) * rng.choice([-1.0, 1.0], n)
    z = z_gt + r
    s = rng.uniform(-2.0, 2.0, n)
    _, dz, ds = laplace_depth_loss(DepthPrediction(z, s), z_gt)
    loss = lambda zz, ss: laplace_depth_loss(DepthPrediction(zz, ss), z_gt)[0]
    num_dz = (loss(z + STEP, s) - loss(z - STEP, s)) / (2 * STEP)
    num_ds = (loss(z, s + STEP) - loss(z, s - STEP)) / (2 * STEP)
    return [
        CheckResult("laplace dL/dz", n, float(relative_error(dz * (1 + perturb), num_dz).max())),
        CheckResult("laplace dL/ds", n, float(relative_error(ds * (1 + perturb), num_ds).max())),
    ]


def random_heatmap_pair(rng: np.random.Generator, channels: int = 2, size: int = 8):
    kps = [
        Keypoint(int(rng.integers(channels)), int(rng.integers(size)), int(rng.integers(size)), float(rng.uniform(0.7, 2.0)))
        for _ in range(3)
    ]
    target = render_keypoints(kps, channels, size, size).values
    pred = rng.uniform(0.02, 0.98, target.shape)
    return pred, target


def check_focal(rng: np.random.Generator, trials: int = 3, perturb: float = 0.0) -> CheckResult:
    worst, count = 0.0, 0
    for _ in range(trials):
        pred, target = random_heatmap_pair(rng)
        _, grad = focal_heatmap_loss(pred, target)
        num = numeric_grad(lambda: focal_heatmap_loss(pred, target)[0], pred)
        worst = max(worst, float(relative_error(grad * (1 + perturb), num).max()))
        count += pred.size
    return CheckResult("focal dL/dp", count, worst)


def tiny_problem(seed: int):
    """A (F=4, hidden=6) net on a 6x6 scene with targets frozen at the current sigma."""
    rng = np.random.default_rng(seed)
    scene = make_scene(rng, width=6, height=6, n_classes=2, n_rects=2, rect_size=(2, 4), samples_per_rect=3)
    net = ToyNet.init(4 + scene.n_classes, seed, n_features=4, n_hidden=6)
    # wider output weights so every parameter gets a visible gradient
    _, _, W2, _ = net.blocks()
    W2 *= 20.0
    feats = scene.features[..., :4]
    z, s, _, _ = forward(net, feats)
    targets = scene_targets(scene, np.exp(s))
    table = ClassWeightTable({0: 10, 1: 2}, {0: 1.0, 1: float(np.sqrt(5.0))})
    return net, feats, targets, table


def check_toynet(seed: int, perturb: float = 0.0) -> list[CheckResult]:
    net, feats, targets, table = tiny_problem(seed)
    lam = Lambdas()
    _, grad = frame_loss_and_grad(net, feats, targets, lam, table)
    num = numeric_grad(lambda: frame_loss_and_grad(net, feats, targets, lam, table)[0].total, net.params)
    err = relative_error(grad * (1 + perturb), num)
    return [
        CheckResult(f"toynet {name}", sl.stop - sl.start, float(err[sl].max()))
        for name, sl in net.block_slices().items()
    ]


def run_all(seed: int = 0, perturb: float = 0.0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        *check_laplace(rng, perturb=perturb),
        check_focal(rng, perturb=perturb),
        *check_toynet(seed, perturb=perturb),
    ]
