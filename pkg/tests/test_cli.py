import json

import numpy as np
import pytest
from plyfile import PlyData

from depthshape.cli import main
from depthshape.geometry import DepthMap
from depthshape.io import read_depth, write_depth
from depthshape.losses import ilnr_normalize
from depthshape.scenes import SceneSpec, synth_scene


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def scene_dir(tmp_path, capsys):
    out = tmp_path / "scene"
    code, _, _ = run(capsys, "synth", "--spec", "box", "--size", "64", "--seed", "2", "--out", out)
    assert code == 0
    return out


def test_synth_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(capsys, "synth", "--spec", "room", "--size", "48", "--seed", "5", "--out", d)[0] == 0
    for name in ("depth.pfm", "labels.txt", "scene.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rec = json.loads((a / "scene.json").read_text())
    assert rec["plane_count"] == synth_scene(SceneSpec("room", 48, 48), 5).planes.plane_count
    assert rec["spec"]["width"] == 48


def test_synth_yaml_spec(tmp_path, capsys):
    spec = tmp_path / "spec.yaml"
    spec.write_text("# a small staircase\nkind: staircase\nwidth: 40\nheight: 30\n")
    code, out, _ = run(capsys, "synth", "--spec", spec)
    assert code == 0 and json.loads(out)["spec"]["kind"] == "staircase"


def test_metrics_identity(scene_dir, capsys):
    depth = scene_dir / "depth.pfm"
    code, out, _ = run(capsys, "metrics", "--input", depth, "--gt", depth, "--report-format", "json")
    assert code == 0
    row = json.loads(out)[0]
    assert row["status"] == "ok" and row["absrel"] == 0 and row["delta1"] == 1
    assert row["whdr"] == 0 and row["timing_s"] is None


def test_metrics_jobs_and_order_invariant(tmp_path, scene_dir, capsys):
    gt = read_depth(scene_dir / "depth.pfm")
    rng = np.random.default_rng(0)
    preds, gts = [], []
    for i in range(4):
        noisy = gt.with_values(np.where(gt.mask, gt.values * rng.uniform(0.9, 1.1, gt.shape), 0))
        p = tmp_path / f"pred{i}.pfm"
        write_depth(noisy, p)
        preds.append(p)
        gts.append(scene_dir / "depth.pfm")
    base = ["metrics", "--input", *preds, "--gt", *gts, "--seed", "3"]
    code1, out1, _ = run(capsys, *base)
    code4, out4, _ = run(capsys, *base, "--jobs", "4")
    assert code1 == code4 == 0 and out1 == out4
    assert len(out1.splitlines()) == 5


def test_metrics_failure_row_and_exit_code(tmp_path, scene_dir, capsys):
    bad = tmp_path / "bad.pfm"
    bad.write_bytes(b"Pf\n2 2\n-1.0\n\x00")
    depth = scene_dir / "depth.pfm"
    code, out, _ = run(capsys, "metrics", "--input", depth, bad, "--gt", depth, depth, "--report-format", "json")
    assert code == 1
    rows = json.loads(out)
    assert rows[0]["status"] == "ok" and rows[1]["status"] == "error_format"


def test_unproject_writes_ply(tmp_path, scene_dir, capsys):
    out = tmp_path / "cloud"
    code, stdout, _ = run(capsys, "unproject", "--input", scene_dir / "depth.pfm", "--normals", "--binary-ply", "--out", out)
    assert code == 0
    ply = PlyData.read(str(out / "points.ply"))
    assert ply["vertex"].count == json.loads(stdout)["points"]
    assert len(ply["vertex"].properties) == 6


def test_perturb_then_recover(tmp_path, scene_dir, capsys):
    # Normalize first so the recovered shift is in the same units.
    gt = read_depth(scene_dir / "depth.pfm")
    unit = tmp_path / "unit.pfm"
    write_depth(gt.with_values(gt.values / gt.valid_values().max()), unit)
    pdir = tmp_path / "p"
    code, out, _ = run(capsys, "perturb", "--input", unit, "--delta", "0.3", "--alpha", "0.9", "--out", pdir)
    assert code == 0
    # Depth files carry no intrinsics: the perturbed focal length travels separately.
    f_out = json.loads(out)["f_out"]
    perturbed = read_depth(pdir / "perturbed.pfm")
    assert perturbed.valid_values().max() == pytest.approx(1.3, abs=1e-6)
    rdir = tmp_path / "r"
    code, out, _ = run(capsys, "recover", "--input", pdir / "perturbed.pfm", "--fx", f_out, "--out", rdir)
    assert code == 0
    rec = json.loads((rdir / "recovery.json").read_text())
    scale = rec["normalization_scale"]
    assert abs(rec["delta_d_hat"] * scale - 0.3) <= 0.02 * scale
    assert abs(rec["alpha_f_hat"] - 0.9) <= 0.05
    assert (rdir / "corrected.ply").exists() and json.loads(out) == rec


def test_perturb_seeded_sampling(tmp_path, scene_dir, capsys):
    args = ["perturb", "--input", scene_dir / "depth.pfm", "--seed", "4"]
    a = json.loads(run(capsys, *args)[1])
    b = json.loads(run(capsys, *args)[1])
    assert a == b and -0.25 <= a["delta_d"] <= 0.8 and 0.6 <= a["alpha_f"] <= 1.25


def test_losses_json(tmp_path, scene_dir, capsys):
    depth = scene_dir / "depth.pfm"
    # A perfect prediction lives in the normalised ground-truth space.
    pred = tmp_path / "pred.pfm"
    write_depth(ilnr_normalize(read_depth(depth)), pred)
    code, out, _ = run(capsys, "losses", "--input", pred, "--gt", depth)
    assert code == 0
    rec = json.loads(out)
    assert rec["pairs"] > 0 and rec["pwn"] < 1e-4
    assert rec["ilnr"]["trimmed"] < 1e-5 and rec["msg"] < 1e-5
    assert rec["ilnr"]["minmax"] > 0.1
    raw = json.loads(run(capsys, "losses", "--input", depth, "--gt", depth)[1])
    assert raw["overall"] > rec["overall"]


def test_bench_after_below_before(tmp_path, capsys):
    out = tmp_path / "bench"
    code, stdout, _ = run(capsys, "bench", "--scenes", "20", "--seed", "1", "--size", "64", "--jobs", "4", "--out", out)
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["mean_absrel_after"] < summary["mean_absrel_before"]
    assert summary["n_failed"] == 0 and summary["n_scenes"] == 20


def test_exit_codes(tmp_path, capsys):
    assert run(capsys, "--version")[0] == 0
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "bench", "--scenes", "0")[0] == 2
    code, _, err = run(capsys, "unproject", "--input", tmp_path / "x.pfm")
    assert code == 2 and "--out" in err
    code, _, err = run(capsys, "recover", "--input", tmp_path / "missing.pfm")
    assert code == 1 and "missing.pfm" in err
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n1 1\n65535\n\x00")
    code, _, err = run(capsys, "recover", "--input", bad)
    assert code == 1 and "FormatError" in err and "offset" in err
    write_depth(DepthMap(np.array([[0.1, 0.2]])), tmp_path / "small.txt")
    code, _, err = run(capsys, "perturb", "--input", tmp_path / "small.txt", "--delta", "-0.25", "--alpha", "1")
    assert code == 1 and "non-positive" in err
