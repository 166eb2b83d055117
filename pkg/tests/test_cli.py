import json
import subprocess
import sys

import numpy as np
import pytest

from sanet import cli
from sanet.imageio import read_netpbm, write_class_map, write_netpbm


@pytest.fixture(scope="module")
def weights(tmp_path_factory):
    path = tmp_path_factory.mktemp("w") / "s.stf"
    assert cli.main(["export-random", "--seed", "0", "--out", str(path)]) == 0
    return path


@pytest.fixture
def photo(tmp_path):
    path = tmp_path / "img.ppm"
    write_netpbm(np.random.default_rng(0).integers(0, 256, (64, 96, 3), dtype=np.uint8), path)
    return path


def test_export_random_is_deterministic(weights, tmp_path):
    assert cli.main(["export-random", "--seed", "0", "--out", str(tmp_path / "b.stf")]) == 0
    assert (tmp_path / "b.stf").read_bytes() == weights.read_bytes()


def test_infer_writes_full_resolution_map(weights, photo, tmp_path):
    out = tmp_path / "seg.ppm"
    assert cli.main(["infer", "--weights", str(weights), "--image", str(photo), "--out", str(out)]) == 0
    assert read_netpbm(out).shape == (64, 96, 3)
    explicit = tmp_path / "seg1.ppm"
    cli.main(["infer", "--weights", str(weights), "--image", str(photo), "--out", str(explicit), "--scales", "1.0"])
    assert explicit.read_bytes() == out.read_bytes()


def test_exit_codes(weights, photo, tmp_path, capsys):
    assert cli.main(["bench", "--size", "12x"]) == 1
    assert cli.main(["infer", "--weights", str(tmp_path / "none.stf"), "--image", str(photo),
                     "--out", str(tmp_path / "o.ppm")]) == 2
    grey = tmp_path / "g.pgm"
    write_netpbm(np.zeros((64, 64), np.uint8), grey)
    assert cli.main(["infer", "--weights", str(weights), "--image", str(grey), "--out", str(tmp_path / "o.ppm")]) == 2
    small = tmp_path / "s.ppm"
    write_netpbm(np.zeros((32, 32, 3), np.uint8), small)
    assert cli.main(["infer", "--weights", str(weights), "--image", str(small), "--out", str(tmp_path / "o.ppm")]) == 2
    assert "error" in capsys.readouterr().err


def test_describe_lists_block_counts(capsys):
    assert cli.main(["describe", "--variant", "m", "--size", "256x512"]) == 0
    text = capsys.readouterr().out
    assert "SANet-M" in text and "11,084,231" in text


def test_rf_ordering(capsys):
    assert cli.main(["rf", "--size", "640x640"]) == 0
    rows = {l.split()[0]: l.split() for l in capsys.readouterr().out.splitlines()[2:]}
    sizes = [int(rows[p][1].split("x")[0]) for p in ("l3", "dp2", "l6")]
    assert sizes == [159, 351, 559]
    assert rows["l3"][3] == "exact"


def test_selftest_and_gradcheck_pass(capsys):
    assert cli.main(["selftest", "--cases", "5", "--seeds", "2"]) == 0
    assert "selftest passed" in capsys.readouterr().out
    assert cli.main(["gradcheck", "--seeds", "2"]) == 0
    assert cli.main(["gradcheck", "--seeds", "1", "--tol", "1e-12"]) == 3


def test_eval_reports_miou(tmp_path, capsys):
    (tmp_path / "p").mkdir()
    (tmp_path / "l").mkdir()
    labels = np.zeros((4, 4), int)
    labels[:, 2:] = 1
    pred = np.zeros((4, 4), int)
    pred[2:] = 1
    write_class_map(pred, tmp_path / "p" / "a.pgm")
    write_class_map(labels, tmp_path / "l" / "a.pgm")
    assert cli.main(["eval", "--pred-dir", str(tmp_path / "p"), "--label-dir", str(tmp_path / "l"), "--classes", "3"]) == 0
    out = capsys.readouterr().out
    assert "miou 0.3333" in out and "class 2   iou absent" in out
    (tmp_path / "p" / "b.pgm").write_bytes((tmp_path / "p" / "a.pgm").read_bytes())
    assert cli.main(["eval", "--pred-dir", str(tmp_path / "p"), "--label-dir", str(tmp_path / "l"), "--classes", "3"]) == 2


def test_bench_report_json(tmp_path, capsys):
    report = tmp_path / "r.json"
    assert cli.main(["bench", "--size", "64x64", "--iters", "3", "--warmup", "1", "--report", str(report)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# python") and "output_sha256" in out
    data = json.loads(report.read_text())["report"]
    assert len(data["latencies_ms"]) == 3 and data["fold_bn"] is True
    assert abs(data["fps"] - 1000 / np.mean(data["latencies_ms"])) <= 1e-9


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "sanet", "describe", "--size", "128x128"], capture_output=True, text=True)
    assert res.returncode == 0 and "SANet-S" in res.stdout
    res = subprocess.run([sys.executable, "-m", "sanet", "nonsense"], capture_output=True, text=True)
    assert res.returncode == 1
