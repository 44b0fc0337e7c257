"""Acceptance criteria, one marked group per criterion.

Each group is tagged ``@pytest.mark.acceptance(n, title)``; the terminal
summary prints one PASS/FAIL line per criterion.
"""

import json
import math
import struct

import numpy as np
import pytest

from dept.cli import main
from dept.depth_targets import Box2D, SemiDenseDepthTarget, UncertaintyMap, propagate
from dept.geometry import CameraModel, SparseDepthMap, backproject_pixel, lidar_to_sparse_depth, project_point
from dept.io_formats import TargetBundle, read_detections, read_kitti_calib, read_target_bundle, read_velodyne_bin, write_target_bundle
from dept.keypoint_targets import DetectionTargets, HeatmapSet, Keypoint, corner_heatmaps, render_keypoints
from dept.losses import DepthPrediction, class_weights, focal_heatmap_loss, laplace_depth_loss
from dept.toygrad import N_CORNERS, ToyNet, TrainConfig, forward, frame_loss_and_grad, make_scene, make_scenes, scene_targets, transfer_experiment

from conftest import FIXTURES
from oracles import gaussian_value, propagate_oracle, radius_oracle, sparse_oracle

H_FD = 1e-5
FD_TOL = 1e-4
# denominator floor for relative error; sits above central-difference
# roundoff (~1e-16 * |loss| / h) so near-zero gradients compare absolutely
REL_FLOOR = 1e-5


def rel_err(a, n):
    a, n = np.asarray(a, float), np.asarray(n, float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)


def central_diff(f, x):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + H_FD
        fp = f()
        flat[i] = old - H_FD
        fm = f()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * H_FD)
    return g


# ---------------------------------------------------------------------------
# 1. propagation


@pytest.mark.acceptance(1, "propagation equals brute-force oracle")
def test_propagation_oracle_500_grids():
    mismatches = 0
    for seed in range(500):
        rng = np.random.default_rng(10_000 + seed)
        density = rng.uniform(0.01, 0.3)
        d = np.where(rng.random((32, 32)) < density, rng.uniform(1, 60, (32, 32)), np.nan)
        if seed % 2:
            s = rng.uniform(0.05, 1.0, (32, 32))
        else:
            s = rng.choice([0.1, 0.2, 0.3, 0.5, 0.7, 0.9], size=(32, 32))
        got = propagate(SparseDepthMap(32, 32, 4, d), UncertaintyMap(32, 32, s), 0.5)
        want = propagate_oracle(d, s, propagated_weight=0.5)
        same = (
            np.array_equal(got.depth, want[0], equal_nan=True)
            and np.array_equal(got.provenance, want[1])
            and np.array_equal(got.weight, want[2])
            and np.array_equal(got.source, want[3])
        )
        mismatches += not same
    assert mismatches == 0


@pytest.mark.acceptance(1, "propagation equals brute-force oracle")
@pytest.mark.parametrize("sigma,cells", [(0.2, 25), (0.5, 9), (0.9, 1)])
def test_published_patch_sizes(sigma, cells):
    d = np.full((32, 32), np.nan)
    d[16, 16] = 20.0
    t = propagate(SparseDepthMap(32, 32, 4, d), UncertaintyMap.constant(32, 32, sigma))
    assert t.count() == cells


# ---------------------------------------------------------------------------
# 2. Laplace depth loss


@pytest.mark.acceptance(2, "Laplace loss gradients and value")
def test_laplace_finite_differences():
    rng = np.random.default_rng(2)
    z_gt = rng.uniform(1, 60, 100)
    r = rng.uniform(1e-3, 5, 100) * rng.choice([-1, 1], 100)
    z, s = z_gt + r, rng.uniform(-2, 2, 100)
    assert np.all(np.abs(z - z_gt) > 1e-3)
    loss = lambda zz, ss: laplace_depth_loss(DepthPrediction(zz, ss), z_gt)[0]
    _, dz, ds = laplace_depth_loss(DepthPrediction(z, s), z_gt)
    num_dz = (loss(z + H_FD, s) - loss(z - H_FD, s)) / (2 * H_FD)
    num_ds = (loss(z, s + H_FD) - loss(z, s - H_FD)) / (2 * H_FD)
    assert rel_err(dz, num_dz).max() < FD_TOL
    assert rel_err(ds, num_ds).max() < FD_TOL


@pytest.mark.acceptance(2, "Laplace loss gradients and value")
def test_laplace_spot_value():
    loss = laplace_depth_loss(DepthPrediction(4.0, math.log(math.sqrt(2))), 5.0)[0]
    assert abs(loss - (1 + 0.5 * math.log(2))) < 1e-9


# ---------------------------------------------------------------------------
# 3. focal loss


@pytest.mark.acceptance(3, "focal loss value and gradients")
def test_focal_spot_value():
    loss, _ = focal_heatmap_loss(np.array([[0.5]]), np.array([[1.0]]))
    assert abs(loss - (-0.25 * math.log(0.5))) < 1e-9


@pytest.mark.acceptance(3, "focal loss value and gradients")
@pytest.mark.parametrize("seed", range(5))
def test_focal_finite_differences(seed):
    rng = np.random.default_rng(300 + seed)
    kps = [Keypoint(0, int(rng.integers(8)), int(rng.integers(8)), float(rng.uniform(0.7, 2))) for _ in range(3)]
    y = render_keypoints(kps, 1, 8, 8).values[0]
    p = rng.uniform(0.02, 0.98, (8, 8))
    _, g = focal_heatmap_loss(p, y)
    num = central_diff(lambda: focal_heatmap_loss(p, y)[0], p)
    assert rel_err(g, num).max() < FD_TOL


# ---------------------------------------------------------------------------
# 4. class weights


@pytest.mark.acceptance(4, "class weights and scale invariance")
def test_published_class_weights():
    w = class_weights([513462, 11154]).weights
    assert w[0] == 1.0
    assert abs(w[1] - 6.7853) <= 1e-3


@pytest.mark.acceptance(4, "class weights and scale invariance")
def test_weight_scale_invariance_50_tables():
    rng = np.random.default_rng(4)
    for _ in range(50):
        counts = rng.integers(1, 10**6, int(rng.integers(2, 11))).tolist()
        c = int(rng.integers(2, 10**4))
        assert class_weights(counts).weights == class_weights([c * n for n in counts]).weights


# ---------------------------------------------------------------------------
# 5. heatmaps


@pytest.mark.acceptance(5, "Gaussian heatmap rendering")
def test_gaussian_values_1000_pairs():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        kp = Keypoint(0, float(rng.uniform(0, 29.4)), float(rng.uniform(0, 19.4)), float(rng.uniform(2 / 3, 6)))
        hm = render_keypoints([kp], 1, 30, 20).values[0]
        cx, cy = kp.cell
        assert hm[cy, cx] == 1.0
        for _ in range(10):
            col, row = int(rng.integers(30)), int(rng.integers(20))
            worst = max(worst, abs(hm[row, col] - gaussian_value(cx, cy, kp.sigma_p, col, row)))
    assert worst < 1e-9


@pytest.mark.acceptance(5, "Gaussian heatmap rendering")
def test_corner_heatmaps_max_combination():
    rng = np.random.default_rng(55)
    for _ in range(20):
        boxes = []
        for _ in range(int(rng.integers(2, 6))):
            x, y = rng.uniform(0, 50, 2)
            boxes.append(Box2D(0, x, y, x + rng.uniform(4, 40), y + rng.uniform(4, 40)))
        hm = corner_heatmaps(boxes, 4, 16, 16).values
        assert hm.min() >= 0 and hm.max() <= 1
        want = np.zeros_like(hm)
        for b in boxes:
            w, h = (b.x_max - b.x_min) / 4, (b.y_max - b.y_min) / 4
            sig = max(radius_oracle(w, h) / 3, 2 / 3)
            corners = [(b.x_min, b.y_min), (b.x_max, b.y_min), (b.x_max, b.y_max), (b.x_min, b.y_max)]
            for ch, (x, y) in enumerate(corners):
                cx = min(math.floor(min(max(x / 4, 0), 15) + 0.5), 15)
                cy = min(math.floor(min(max(y / 4, 0), 15) + 0.5), 15)
                assert hm[ch, cy, cx] == 1.0
                for row in range(16):
                    for col in range(16):
                        want[ch, row, col] = max(want[ch, row, col], gaussian_value(cx, cy, sig, col, row))
        assert np.abs(hm - want).max() < 1e-9


# ---------------------------------------------------------------------------
# 6. geometry


@pytest.mark.acceptance(6, "projection round trip and lidar gridding")
def test_project_backproject_10k():
    rng = np.random.default_rng(6)
    cam = CameraModel(707.0493, 707.0493, 604.0814, 180.5066, 1242, 375)
    u = rng.uniform(0, 1242, 10_000)
    v = rng.uniform(0, 375, 10_000)
    d = rng.uniform(0.5, 80, 10_000)
    worst = 0.0
    for i in range(10_000):
        pu, pv, _ = project_point(backproject_pixel(u[i], v[i], d[i], cam), cam)
        worst = max(worst, abs(pu - u[i]), abs(pv - v[i]))
    assert worst < 1e-6


@pytest.mark.acceptance(6, "projection round trip and lidar gridding")
def test_lidar_gridding_matches_per_point_oracle(calib_text):
    calib = read_kitti_calib(calib_text)
    rng = np.random.default_rng(66)
    pts = np.column_stack([rng.uniform(-5, 80, 5000), rng.uniform(-20, 20, 5000), rng.uniform(-2, 2, 5000)])
    for stride in (1, 4, 7):
        got = lidar_to_sparse_depth(pts, calib.extrinsic, calib.camera, stride)
        want = sparse_oracle(pts, calib.extrinsic, calib.camera, stride)
        assert np.array_equal(got.depth, want, equal_nan=True)


# ---------------------------------------------------------------------------
# 7. toy network gradients


@pytest.mark.acceptance(7, "exhaustive toy-network gradient check")
@pytest.mark.parametrize("seed", range(3))
def test_toynet_every_parameter(seed):
    rng = np.random.default_rng(seed)
    scene = make_scene(rng, width=6, height=6, n_rects=2, rect_size=(2, 4), samples_per_rect=3)
    net = ToyNet.init(N_CORNERS + scene.n_classes, seed, n_features=4, n_hidden=6)
    net.blocks()[2][...] *= 20.0  # larger head weights so no gradient is negligible
    feats = scene.features[..., :4]
    _, s, _, _ = forward(net, feats)
    targets = scene_targets(scene, np.exp(s), propagated_weight=0.5)
    table = class_weights({0: 3, 1: 1})
    _, grad = frame_loss_and_grad(net, feats, targets, None, table)
    num = central_diff(lambda: frame_loss_and_grad(net, feats, targets, None, table)[0].total, net.params)
    assert np.count_nonzero(grad) > 0.9 * grad.size
    assert rel_err(grad, num).max() < FD_TOL


# ---------------------------------------------------------------------------
# 8. pre-train / fine-tune


SEEDS = range(5)
SCENE_KW = dict(rect_size=(4, 8), samples_per_rect=8)


@pytest.mark.acceptance(8, "depth pre-training speeds up fine-tuning")
def test_pretrained_depth_loss_lower_early():
    pre_early, scratch_early = [], []
    for seed in SEEDS:
        pre = make_scenes(12, 1000 + seed, **SCENE_KW)
        fine = make_scenes(6, 2000 + seed, **SCENE_KW)
        res = transfer_experiment(pre, fine, TrainConfig(epochs=5, learning_rate=0.1, seed=seed), pre_epochs=20)
        a, b = res.early_depth(5)
        pre_early.append(a)
        scratch_early.append(b)
    print(f"early depth loss per seed: pretrained {np.round(pre_early, 4)} scratch {np.round(scratch_early, 4)}")
    assert np.mean(pre_early) < np.mean(scratch_early)
    assert all(a < b for a, b in zip(pre_early, scratch_early))


@pytest.mark.acceptance(8, "depth pre-training speeds up fine-tuning")
def test_identical_data_final_losses_agree():
    finals = []
    for seed in SEEDS:
        scenes = make_scenes(6, 2000 + seed, **SCENE_KW)
        res = transfer_experiment(scenes, scenes, TrainConfig(epochs=150, learning_rate=0.1, seed=seed), pre_epochs=20)
        finals.append((res.pretrained[-1].total, res.scratch[-1].total))
    finals = np.array(finals)
    print(f"final totals (pretrained, scratch): {finals.round(4).tolist()}")
    gap = np.abs(finals[:, 0] - finals[:, 1]) / finals.max(axis=1)
    a, b = finals.mean(axis=0)
    assert abs(a - b) / max(a, b) < 0.10
    assert gap.max() < 0.10


# ---------------------------------------------------------------------------
# 9. I/O


@pytest.mark.acceptance(9, "bit-exact I/O")
def test_golden_fixtures(calib_text):
    calib = read_kitti_calib(calib_text)
    p2 = [float(t) for t in calib_text.splitlines()[2].split()[1:]]
    assert calib.P2.ravel().tolist() == p2
    assert calib.camera.fx == 707.0493 and calib.camera.cy == 180.5066

    assert read_velodyne_bin((FIXTURES / "velodyne_one_point.bin").read_bytes()).tolist() == [[1.0, 2.0, 3.0, 0.5]]
    assert read_velodyne_bin(struct.pack("<8f", *range(8))).tolist() == [[0, 1, 2, 3], [4, 5, 6, 7]]

    with open(FIXTURES / "detections_golden.ndjson") as fh:
        dets = read_detections(fh)
    assert dets.all_boxes() == [
        Box2D(0, 712.4, 143.0, 810.73, 307.92, 0.96),
        Box2D(2, 599.41, 156.4, 629.75, 189.25, 0.3),
    ]


@pytest.mark.acceptance(9, "bit-exact I/O")
def test_bundle_round_trip_raw_payloads(tmp_path):
    rng = np.random.default_rng(9)
    H, W = 11, 13
    prov = rng.integers(0, 3, (H, W)).astype(np.int8)
    depth = np.where(prov > 0, rng.uniform(0.5, 80, (H, W)), np.nan)
    t = SemiDenseDepthTarget(W, H, 4, depth, prov, np.where(prov > 0, rng.random((H, W)), 0.0), rng.integers(-1, H * W, (H, W)))
    f32 = lambda shape: rng.random(shape).astype(np.float32).astype(np.float64)
    det = DetectionTargets(HeatmapSet(f32((3, H, W))), np.array([[1, 2, 3]]), rng.random((1, 2)) * 9, rng.random((1, 2)))
    bundle = TargetBundle("frame", t, HeatmapSet(f32((4, H, W))), det, {"k": [1, 2]})
    write_target_bundle(bundle, tmp_path)
    back = read_target_bundle(tmp_path)
    for name in ("depth", "provenance", "weight", "source"):
        assert np.array_equal(getattr(back.depth, name), getattr(t, name), equal_nan=True)
    assert np.array_equal(back.corners.values, bundle.corners.values)
    assert np.array_equal(back.detection.center_heatmaps.values, det.center_heatmaps.values)
    for name in ("indices", "sizes", "offsets"):
        assert np.array_equal(getattr(back.detection, name), getattr(det, name))


@pytest.mark.acceptance(9, "bit-exact I/O")
def test_gen_targets_reruns_byte_identical(dataset, tmp_path, capsys):
    for name, jobs in (("a", 1), ("b", 3)):
        argv = ["gen-targets", str(dataset), "--out", str(tmp_path / name), "--jobs", str(jobs), "--sigma", "0.4"]
        assert main(argv) == 0
    capsys.readouterr()
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    assert json.loads((tmp_path / "a" / "report.json").read_text())["n_ok"] == 3
