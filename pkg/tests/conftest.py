import json
from pathlib import Path

import numpy as np
import pytest

from dept.io_formats import write_velodyne_bin

FIXTURES = Path(__file__).parent / "fixtures"

_acceptance: dict[int, dict] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _acceptance.setdefault(number, {"title": title, "ok": True, "tests": 0})
    if call.when == "call":
        entry["tests"] += 1
    if call.excinfo is not None:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        e = _acceptance[number]
        status = "PASS" if e["ok"] and e["tests"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {e['title']} ({e['tests']} tests)")


@pytest.fixture
def calib_text():
    return (FIXTURES / "calib_000000.txt").read_text()


def _scan(rng, n=4000):
    """Points on a few surfaces ahead of the car, in velodyne axes (x fwd, y left, z up)."""
    x = rng.uniform(4.0, 70.0, n)
    y = rng.uniform(-12.0, 12.0, n)
    z = rng.uniform(-1.7, 1.5, n)
    # snap a third of the points onto a wall so depths repeat per cell
    wall = rng.random(n) < 0.33
    x[wall] = 15.0
    return np.column_stack([x, y, z, rng.uniform(0, 1, n)]).astype(np.float32)


def make_dataset(root: Path, n_frames: int = 3, seed: int = 0) -> Path:
    """A tiny KITTI-style dataset with calib, velodyne and pseudo boxes."""
    rng = np.random.default_rng(seed)
    calib = (FIXTURES / "calib_000000.txt").read_text()
    (root / "calib").mkdir(parents=True)
    (root / "velodyne").mkdir()
    lines = []
    for i in range(n_frames):
        fid = f"{i:06d}"
        (root / "calib" / f"{fid}.txt").write_text(calib)
        (root / "velodyne" / f"{fid}.bin").write_bytes(write_velodyne_bin(_scan(rng)))
        for _ in range(4):
            x1 = float(rng.uniform(0, 1100))
            y1 = float(rng.uniform(100, 300))
            w, h = float(rng.uniform(30, 200)), float(rng.uniform(20, 80))
            lines.append(
                json.dumps(
                    {
                        "frame_id": fid,
                        "class_id": int(rng.integers(0, 3)),
                        "bbox": [round(x1, 2), round(y1, 2), round(x1 + w, 2), round(y1 + h, 2)],
                        "score": round(float(rng.uniform(0.2, 1.0)), 3),
                    }
                )
            )
    (root / "detections.ndjson").write_text("\n".join(lines) + "\n")
    return root


@pytest.fixture
def dataset(tmp_path):
    return make_dataset(tmp_path / "data")
