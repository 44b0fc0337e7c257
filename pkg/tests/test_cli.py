import json
import re

import pytest

from dept.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_class_fixture(path, counts):
    with open(path, "w") as fh:
        for k, n in enumerate(counts):
            line = json.dumps({"frame_id": "f", "class_id": k, "bbox": [0, 0, 10, 10], "score": 0.9})
            fh.write((line + "\n") * n)
    return path


def weight_column(out):
    return [float(m) for m in re.findall(r"^\s*\d+\s+\d+\s+([0-9.]+)", out, flags=re.M)]


def test_class_weights_published_counts(capsys, tmp_path):
    path = write_class_fixture(tmp_path / "d.ndjson", [513462, 11154])
    code, out, _ = run(capsys, "class-weights", path, "--n-classes", 2)
    assert code == 0
    w = weight_column(out)
    assert out.count("1.0000") == 1 and "(majority)" in out
    assert w[0] == 1.0 and abs(w[1] - 6.7853) <= 1e-3


def test_class_weights_uniform(capsys, tmp_path):
    path = write_class_fixture(tmp_path / "d.ndjson", [4, 4, 4])
    code, out, _ = run(capsys, "class-weights", path, "--n-classes", 3)
    assert code == 0 and weight_column(out) == [1.0, 1.0, 1.0]


def test_class_weights_zero_count(capsys, tmp_path):
    path = write_class_fixture(tmp_path / "d.ndjson", [4, 0, 4])
    code, _, err = run(capsys, "class-weights", path, "--n-classes", 3)
    assert code == 2 and "class 1" in err


def test_class_weights_bad_input(capsys, tmp_path):
    (tmp_path / "bad.ndjson").write_text("{oops\n")
    code, _, err = run(capsys, "class-weights", tmp_path / "bad.ndjson", "--n-classes", 2)
    assert code == 1 and "line 1" in err


def test_gradcheck_passes_and_is_reproducible(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", 3)
    assert code == 0 and "FAIL" not in out
    code2, out2, _ = run(capsys, "gradcheck", "--seed", 3)
    assert (code2, out2) == (code, out)


def test_gradcheck_negative_control(capsys):
    code, out, _ = run(capsys, "gradcheck", "--perturb-gradient", 0.01)
    assert code == 2 and "FAIL" in out


def test_toy_zero_epochs_header_only(capsys):
    code, out, _ = run(capsys, "toy", "train", "--epochs", 0)
    assert code == 0
    assert out == "epoch,depth,corner_focal,center_focal,size,offset,total\n"


def test_toy_runs_are_reproducible(capsys, tmp_path):
    args = ("toy", "train", "--epochs", 3, "--scenes", 3, "--seed", 4)
    assert run(capsys, *args, "--out", tmp_path / "a.csv")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b.csv")[0] == 0
    a = (tmp_path / "a.csv").read_text()
    assert a == (tmp_path / "b.csv").read_text()
    assert len(a.splitlines()) == 4


def test_toy_transfer_verdict(capsys):
    code, out, err = run(capsys, "toy", "transfer", "--seeds", 5)
    assert code == 0
    assert "pretrained faster" in err
    assert out.splitlines()[0] == "seed,run,epoch,depth,corner_focal,center_focal,size,offset,total"


def test_toy_divergence_exit_code(capsys):
    code, _, err = run(capsys, "toy", "train", "--epochs", 30, "--lr", 1e6, "--scenes", 2)
    assert code == 2 and "diverged" in err


def test_gen_targets_empty_dir(capsys, tmp_path):
    code, _, err = run(capsys, "gen-targets", tmp_path, "--out", tmp_path / "out")
    assert code == 1 and "no frames found" in err


def test_gen_targets_reruns_are_byte_identical(capsys, dataset, tmp_path):
    outs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "gen-targets", dataset, "--out", tmp_path / name, "--sigma", 0.2, "--jobs", 2)
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1] and outs[0].startswith("frames: 3/3 ok")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 2 + 3 * 6
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_gen_targets_config_file_and_bad_value(capsys, dataset, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("stride=8\n")
    code, out, _ = run(capsys, "gen-targets", dataset, "--out", tmp_path / "o", "--config", cfg, "--json", "--jobs", 1)
    assert code == 0 and json.loads(out)["config"]["stride"] == 8
    code, _, err = run(capsys, "gen-targets", dataset, "--out", tmp_path / "o2", "--patch-lo", 4)
    assert code == 1 and "patch_lo" in err


def test_help_marks_default_provenance(capsys):
    with pytest.raises(SystemExit):
        main(["gen-targets", "--help"])
    out = capsys.readouterr().out
    assert "published value" in out and "chosen default" in out
