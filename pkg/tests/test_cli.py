import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from conftest import DATA
from indoordepth.cli import main
from indoordepth.dataset import load_depth_png, save_depth_png
from indoordepth.image import DepthMap, flip_horizontal, read_png16, read_raw_depth, write_png16


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def maps(tmp_path):
    """Three GT maps plus exact, doubled and hole-injected predictions."""
    rng = np.random.default_rng(0)
    dirs = {name: tmp_path / name for name in ("gt", "same", "double", "holes")}
    for d in dirs.values():
        d.mkdir()
    for i in range(3):
        vals = np.round(rng.uniform(0.8, 4.0, (24, 32)) * 5000) / 5000
        gt = DepthMap(vals)
        save_depth_png(dirs["gt"] / f"{i}.png", gt)
        save_depth_png(dirs["same"] / f"{i}.png", gt)
        save_depth_png(dirs["double"] / f"{i}.png", DepthMap(2 * vals))
        holed = vals.copy()
        holed[rng.random(vals.shape) < 0.05] = 0
        save_depth_png(dirs["holes"] / f"{i}.png", DepthMap(holed))
    return dirs


# --- associate --------------------------------------------------------------------


def test_associate_fixture(tmp_path, capsys):
    dest = tmp_path / "assoc.txt"
    code, _, err = run(capsys, "associate", DATA / "rgb.txt", DATA / "depth.txt", "-o", dest)
    assert code == 0
    lines = dest.read_text().splitlines()
    assert f"{len(lines)} pairs" in err
    assert all(len(line.split()) == 4 for line in lines)
    first = dest.read_bytes()
    run(capsys, "associate", DATA / "rgb.txt", DATA / "depth.txt", "-o", dest)
    assert dest.read_bytes() == first


def test_associate_max_dt_zero_exact_only(tmp_path, capsys):
    (tmp_path / "r.txt").write_text("1.0 r1.png\n2.0 r2.png\n")
    (tmp_path / "d.txt").write_text("1.0 d1.png\n2.005 d2.png\n")
    code, out, _ = run(capsys, "associate", tmp_path / "r.txt", tmp_path / "d.txt", "--max-dt", 0)
    assert code == 0
    assert out.splitlines() == ["1.000000 r1.png 1.000000 d1.png"]


def test_associate_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.txt"
    code, _, err = run(capsys, "associate", missing, DATA / "depth.txt")
    assert code == 2 and str(missing) in err


# --- eval -------------------------------------------------------------------------------


def test_eval_identical_is_perfect(maps, capsys):
    code, out, _ = run(capsys, "eval", maps["same"], maps["gt"], "--json")
    assert code == 0
    rep = json.loads(out.splitlines()[-1])
    assert rep["rmse"] == 0 and rep["abs_rel"] == 0 and rep["delta3"] == 1.0


def test_eval_double_without_scaling(maps, capsys):
    code, out, _ = run(capsys, "eval", maps["double"], maps["gt"], "--json", "--no-median-scaling")
    assert code == 0
    rep = json.loads(out)
    assert rep["abs_rel"] == pytest.approx(1.0, abs=1e-12)
    assert rep["delta1"] == rep["delta2"] == rep["delta3"] == 0.0


def test_eval_table_and_csv(maps, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", maps["same"], maps["gt"], "--per-frame", "--csv", tmp_path / "r.csv")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].split()[0] == "Frame" and len(lines) == 2 + 4
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["name"] for r in rows] == ["0", "1", "2", "mean"]


def test_eval_workers_same_output(maps, capsys):
    _, one, _ = run(capsys, "eval", maps["holes"], maps["gt"], "--per-frame", "--json")
    _, many, _ = run(capsys, "eval", maps["holes"], maps["gt"], "--per-frame", "--json", "--workers", 3)
    assert one == many


def test_eval_resizes_prediction_to_gt(tmp_path, capsys):
    save_depth_png(tmp_path / "gt.png", DepthMap(np.full((24, 32), 2.0)))
    save_depth_png(tmp_path / "pred.png", DepthMap(np.full((12, 16), 2.0)))
    code, out, _ = run(capsys, "eval", tmp_path / "pred.png", tmp_path / "gt.png", "--json")
    assert code == 0 and json.loads(out)["n_pixels"] == 24 * 32


def test_eval_errors(maps, tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    code, _, err = run(capsys, "eval", empty, maps["gt"])
    assert code == 2 and "no depth maps" in err
    (maps["same"] / "0.png").unlink()
    code, _, err = run(capsys, "eval", maps["same"], maps["gt"])
    assert code == 2 and "2 predictions but 3" in err
    code, _, _ = run(capsys, "eval", maps["gt"], maps["gt"], "--cap", 5, 1)
    assert code == 1


# --- postprocess ---------------------------------------------------------------------------


def test_postprocess_elwf_own_flip_is_identity(tmp_path, capsys):
    vals = np.random.default_rng(1).integers(4000, 20000, (10, 16)).astype(np.uint16)
    write_png16(tmp_path / "a.png", vals)
    write_png16(tmp_path / "b.png", np.ascontiguousarray(flip_horizontal(vals)))
    code, _, _ = run(capsys, "postprocess", "elwf", tmp_path / "a.png", tmp_path / "b.png", "-o", tmp_path / "o.png")
    assert code == 0
    assert_array_equal(read_png16(tmp_path / "o.png"), vals)


def test_postprocess_filter_matches_golden(tmp_path, capsys):
    dest = tmp_path / "out.png"
    code, out, _ = run(capsys, "postprocess", "filter", DATA / "golden_depth.png", "-o", dest, "--size", 35)
    assert code == 0 and out.strip() == str(dest)
    assert_array_equal(read_png16(dest), read_png16(DATA / "golden_median35.png"))


def test_postprocess_godard_width20(tmp_path, capsys):
    a = np.full((4, 20), 1.0)
    b = np.full((4, 20), 4.0)
    DepthMap(a)
    save_depth_png(tmp_path / "a.png", DepthMap(a))
    save_depth_png(tmp_path / "b.png", DepthMap(b))
    code, _, _ = run(capsys, "postprocess", "godard", tmp_path / "a.png", tmp_path / "b.png",
                     "-o", tmp_path / "g.rdpf", "--combine-domain", "depth")
    assert code == 0
    out = read_raw_depth(tmp_path / "g.rdpf").values
    assert_array_equal(out[:, 0], 1.0)
    assert_array_equal(out[:, 19], 4.0)
    assert_array_equal(out[:, 1:19], 2.5)


def test_postprocess_directories_and_reruns(maps, tmp_path, capsys):
    out = tmp_path / "filtered"
    code, _, _ = run(capsys, "postprocess", "filter", maps["holes"], "-o", out, "--size", 5, "--workers", 2)
    assert code == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["0.png", "1.png", "2.png"]
    before = {n: (out / n).read_bytes() for n in names}
    run(capsys, "postprocess", "filter", maps["holes"], "-o", out, "--size", 5)
    assert {n: (out / n).read_bytes() for n in names} == before
    assert load_depth_png(out / "0.png").mask.all()


@pytest.mark.parametrize("argv", [["filter", "--size", "4"], ["elwf"], ["filter", "--filter", "mean"]])
def test_postprocess_usage_errors(maps, tmp_path, capsys, argv):
    mode, *rest = argv
    code, _, _ = run(capsys, "postprocess", mode, maps["gt"], "-o", tmp_path / "x", *rest)
    assert code == 1


# --- filter-study -------------------------------------------------------------------------


def test_filter_study_default_grid(maps, tmp_path, capsys):
    code, out, _ = run(capsys, "filter-study", maps["holes"], maps["gt"], "-o", tmp_path / "fs")
    assert code == 0
    rows = out.splitlines()[2:]
    assert sorted(r.split()[0] for r in rows) == ["max-15", "median-35", "median-55", "none"]
    rmse = [float(r.split()[1]) for r in rows]
    assert rmse == sorted(rmse)
    assert (tmp_path / "fs" / "filter_study.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert len((tmp_path / "fs" / "filter_study.csv").read_text().splitlines()) == 5


def test_filter_study_none_reproduces_eval(maps, tmp_path, capsys):
    run(capsys, "filter-study", maps["holes"], maps["gt"], "--grid", "none", "-o", tmp_path / "a")
    run(capsys, "eval", maps["holes"], maps["gt"], "--csv", tmp_path / "e.csv")
    study = list(csv.DictReader(open(tmp_path / "a" / "filter_study.csv")))[0]
    ev = [r for r in csv.DictReader(open(tmp_path / "e.csv")) if r["name"] == "mean"][0]
    for key in ("rmse", "abs_rel", "sq_rel", "delta1", "delta2", "delta3", "n_pixels"):
        assert study[key] == ev[key]


def test_filter_study_medians_beat_none_on_holes(tmp_path, capsys):
    run(capsys, "synth", "holes", "-o", tmp_path / "h", "--count", 6, "--width", 48, "--height", 36)
    code, out, _ = run(capsys, "filter-study", tmp_path / "h" / "pred", tmp_path / "h" / "gt",
                       "--grid", "none,median-3,median-15,median-35")
    assert code == 0
    rmse = {r.split()[0]: float(r.split()[1]) for r in out.splitlines()[2:]}
    assert all(rmse[k] <= rmse["none"] for k in rmse)


def test_filter_study_bad_grid(maps, capsys):
    code, _, err = run(capsys, "filter-study", maps["holes"], maps["gt"], "--grid", "none,median-4")
    assert code == 1 and "median-4" in err


# --- optimize / synth -----------------------------------------------------------------------


def test_optimize_identity_motion_flat_trace(tmp_path, capsys):
    cfg = {"scene": {"width": 32, "height": 24, "depth_profile": "plane", "rotation": [0, 0, 0], "translation": [0, 0, 0]},
           "init": {"rotation_deg": 0.0, "translation_frac": 0.0}, "optimizer": {"steps": 10}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, out, _ = run(capsys, "optimize", tmp_path / "c.json", "-o", tmp_path / "run")
    assert code == 0
    totals = [float(r["total"]) for r in csv.DictReader(open(tmp_path / "run" / "trace.csv"))]
    assert len(totals) == 11 and max(totals) <= 1e-8
    assert out.splitlines()[0] == "step,total"
    for name in ("config.json", "pose.json", "depth.rdpf", "loss_trace.png"):
        assert (tmp_path / "run" / name).exists()


def test_optimize_overrides_and_byte_identical_rerun(tmp_path, capsys):
    args = ["optimize", "-o", None, "--steps", 4, "--scene-seed", 2, "--depth-profile", "steps", "--strategy", "A"]
    outs = []
    for name in ("a", "b"):
        args[2] = tmp_path / name
        code, out, _ = run(capsys, *args)
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1]
    for f in ("trace.csv", "pose.json", "depth.rdpf", "config.json", "loss_trace.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    cfg = json.loads((tmp_path / "a" / "config.json").read_text())
    assert cfg["optimizer"]["steps"] == 4 and cfg["scene"]["depth_profile"] == "steps" and cfg["strategy"] == "A"


@pytest.mark.parametrize(
    "text",
    ["{not json", "[]", '{"scene": {"colour": 1}}', '{"optimizer": {"steps": 0}}', '{"strategy": "C"}',
     '{"weights": {"alpha": -1}}', '{"extra": 1}'],
)
def test_optimize_malformed_config(tmp_path, capsys, text):
    (tmp_path / "c.json").write_text(text)
    code, _, err = run(capsys, "optimize", tmp_path / "c.json", "-o", tmp_path / "run")
    assert code == 1 and "error" in err


def test_optimize_divergence_exit_code(tmp_path, capsys):
    cfg = {"scene": {"width": 32, "height": 24}, "optimizer": {"steps": 20, "step_size": 50.0, "monotone": False}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, _, _ = run(capsys, "optimize", tmp_path / "c.json", "-o", tmp_path / "run")
    assert code == 3
    assert (tmp_path / "run" / "trace.csv").exists()


def test_synth_pair(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", "pair", "-o", tmp_path / "s", "--width", 32, "--height", 24)
    assert code == 0
    for name in ("target.png", "source.png", "depth_target.png", "depth_source.png", "intrinsics.txt", "pose.json"):
        assert (tmp_path / "s" / name).exists()
    assert json.loads((tmp_path / "s" / "pose.json").read_text())["translation"] == [0.12, 0.03, 0.04]


def test_synth_holes_fraction(tmp_path, capsys):
    run(capsys, "synth", "holes", "-o", tmp_path / "h", "--count", 3, "--width", 50, "--height", 40)
    pred = load_depth_png(tmp_path / "h" / "pred" / "0000.png")
    assert (~pred.mask).sum() == 20


def test_usage_errors(capsys):
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "eval", "a", "b", "--workers", 0)[0] == 1


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "indoordepth", "associate", str(DATA / "rgb.txt"), str(DATA / "depth.txt")],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.count("\n") > 40
