import json

import numpy as np
import pytest

from pnec.cli import main
from pnec.geometry import so3_exp
from pnec.io import format_correspondences, format_poses, parse_problem
from pnec.metrics import Trajectory, e_rot
from pnec.synthgen import SceneConfig, generate_problem

SMALL_SCENE = {"scene": {"n_points": 20}}
LEARN = ["--n-problems", "64", "--batch-size", "32", "--epochs", "2", "--no-baselines"]


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL_SCENE))
    return str(p)


@pytest.fixture
def noise_free_csv(tmp_path):
    sp = generate_problem(SceneConfig(n_points=30, seed=11, noise_scale_range=(0.0, 0.0)))
    path = tmp_path / "corr.csv"
    path.write_text(format_correspondences(sp.correspondences(noisy=False), with_covariances=False))
    return path, sp


def _traj(rel_angles, axis=(0.0, 0.0, 1.0)):
    axis = np.asarray(axis)
    R_rel = np.stack([so3_exp(a * axis) for a in rel_angles])
    return Trajectory.from_relative(R_rel, np.tile([0.0, 0.0, 1.0], (len(rel_angles), 1)))


# ---------------------------------------------------------------- estimate


def test_estimate_recovers_noise_free_pose(noise_free_csv, tmp_path, capsys):
    path, sp = noise_free_csv
    assert main(["estimate", str(path), "--out", str(tmp_path / "o")]) == 0
    rec = json.loads((tmp_path / "o" / "pose.json").read_text())
    assert e_rot(np.reshape(rec["R"], (3, 3)), sp.R) < 1e-6
    assert all(rec["inliers"]) and set(rec["stage_energies"]) == {"ransac", "nec_ls", "pnec"}
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["command"] == "estimate" and len(man["input_sha256"]) == 64
    assert main(["estimate", str(path)]) == 0
    assert json.loads(capsys.readouterr().out)["R"] == rec["R"]


def test_estimate_too_few_rows_is_usage_error(tmp_path, capsys):
    path = tmp_path / "seven.csv"
    path.write_text("x1,y1,x2,y2\n" + "".join(f"{i},{2 * i},{i + 1},{2 * i}\n" for i in range(7)))
    assert main(["estimate", str(path)]) == 2
    assert "8" in capsys.readouterr().err


@pytest.mark.parametrize("content", ["bad,header\n1,2\n", None])
def test_estimate_bad_input(tmp_path, content):
    path = tmp_path / "in.csv"
    if content is not None:
        path.write_text(content)
    assert main(["estimate", str(path)]) == 2


def test_estimate_numerical_failure_exit_code(tmp_path):
    # every correspondence identical: the eight-point system is rank one
    path = tmp_path / "same.csv"
    path.write_text("x1,y1,x2,y2\n" + "100,100,110,100\n" * 12)
    assert main(["estimate", str(path)]) == 3


def test_estimate_with_reprojection_oracle(tmp_path):
    sp = generate_problem(SceneConfig(n_points=40, seed=3))
    noisy, truth = tmp_path / "noisy.csv", tmp_path / "truth.csv"
    noisy.write_text(format_correspondences(sp.correspondences(noisy=True)))
    truth.write_text(format_correspondences(sp.correspondences(noisy=False)))
    assert main(["estimate", str(noisy), "--reprojection-oracle", str(truth), "--out", str(tmp_path / "o")]) == 0
    rec = json.loads((tmp_path / "o" / "pose.json").read_text())
    assert e_rot(np.reshape(rec["R"], (3, 3)), sp.R) < np.deg2rad(0.5)
    short = tmp_path / "short.csv"
    short.write_text("\n".join(truth.read_text().splitlines()[:10]) + "\n")
    assert main(["estimate", str(noisy), "--reprojection-oracle", str(short)]) == 2


# ---------------------------------------------------------------- eval


def test_eval_identical_trajectories_are_zero(tmp_path, capsys):
    gt = tmp_path / "gt.txt"
    gt.write_text(format_poses(_traj([0.01, -0.02, 0.03, 0.0])))
    assert main(["eval", str(gt), str(gt)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "seq,rpe1_deg,rpen_deg,et_deg"
    assert [float(v) for v in lines[1].split(",")[1:]] == pytest.approx([0.0, 0.0, 0.0], abs=1e-6)


def test_eval_constant_offset(tmp_path, capsys):
    base = [0.01, -0.02, 0.03, 0.0, 0.02]
    gt, est = tmp_path / "gt.txt", tmp_path / "est.txt"
    gt.write_text(format_poses(_traj(base)))
    est.write_text(format_poses(_traj([a + np.deg2rad(0.1) for a in base])))
    assert main(["eval", str(est), str(gt), "--format", "json"]) == 0
    row = json.loads(capsys.readouterr().out)[0]
    assert row["seq"] == "est" and row["rpe1_deg"] == pytest.approx(0.1, abs=1e-9)
    assert row["rpen_deg"] == pytest.approx(0.5, abs=1e-9)


def test_eval_usage_errors(tmp_path):
    a = tmp_path / "a.txt"
    a.write_text(format_poses(_traj([0.0, 0.1])))
    b = tmp_path / "b.txt"
    b.write_text(format_poses(_traj([0.0, 0.1, 0.2])))
    assert main(["eval", str(a)]) == 2
    assert main(["eval", str(a), str(b)]) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("1 2 3\n")
    assert main(["eval", str(bad), str(a)]) == 2


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_quick_passes(tmp_path, capsys):
    assert main(["gradcheck", "--quick"]) == 0
    out = capsys.readouterr().out
    assert out.strip().endswith("PASS") and "eigen_angle_entropy" in out
    assert main(["gradcheck", "--quick", "--out", str(tmp_path / "g")]) == 0
    assert json.loads((tmp_path / "g" / "gradcheck.json").read_text())["passed"] is True


def test_gradcheck_injected_fault_breaches(capsys):
    assert main(["gradcheck", "--quick", "--inject-fault", "dn_dx_sign"]) == 4
    assert capsys.readouterr().out.strip().endswith("FAIL")
    # the fault does not leak into later runs
    assert main(["gradcheck", "--quick"]) == 0


# ---------------------------------------------------------------- varapprox


def test_varapprox_small_sweep(capsys):
    assert main(["varapprox", "--samples", "4000", "--focals", "360", "720"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3 and lines[1].startswith("360.0,")


def test_varapprox_zero_covariance(capsys):
    assert main(["varapprox", "--samples", "400", "--focals", "720", "--zero-covariance", "--format", "json"]) == 0
    row = json.loads(capsys.readouterr().out)[0]
    assert row["analytic_var"] == 0 and row["mc_var"] == 0 and row["rel_err"] == 0


# ---------------------------------------------------------------- learning commands


def test_synth_overfit_zero_learning_rate_is_flat(small_cfg, capsys):
    assert main(["synth-overfit", "--config", small_cfg, *LEARN, "--lr", "0"]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert len({r.split(",", 1)[1] for r in rows}) == 1


def test_synth_diverse_artifacts(small_cfg, tmp_path):
    out = tmp_path / "d"
    assert main(["synth-diverse", "--config", small_cfg, *LEARN, "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["covariances.json", "curve.csv", "manifest.json", "recovery.csv"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "synth-diverse" and man["config"]["epochs"] == 2


def test_synth_overfit_divergence_exit_code(small_cfg, tmp_path):
    cfg = tmp_path / "div.json"
    cfg.write_text(json.dumps({**SMALL_SCENE, "divergence_factor": 1.000000001}))
    out = tmp_path / "o"
    argv = ["synth-overfit", "--config", str(cfg), "--n-problems", "64", "--batch-size", "64", "--epochs", "3",
            "--no-baselines", "--lr", "5", "--out", str(out)]
    assert main(argv) == 3
    assert (out / "curve.csv").exists()


def test_synth_problem_replays(tmp_path):
    out = tmp_path / "p"
    assert main(["synth-problem", "--seed", "5", "--n-points", "30", "--out", str(out)]) == 0
    sp = parse_problem((out / "problem.json").read_text())
    assert sp.n_points == 30
    ref = generate_problem(SceneConfig(n_points=30, seed=5))
    assert sp.obs2.tobytes() == ref.obs2.tobytes()
    assert main(["estimate", str(out / "truth.csv"), "--out", str(tmp_path / "e")]) == 0
    rec = json.loads((tmp_path / "e" / "pose.json").read_text())
    assert e_rot(np.reshape(rec["R"], (3, 3)), sp.R) < 1e-6


# ---------------------------------------------------------------- usage handling


@pytest.mark.parametrize("argv", [
    [],
    ["nope"],
    ["gradcheck", "--seed", "x"],
    ["varapprox", "--samples", "2"],
    ["synth-overfit", "--config", "/nonexistent.json"],
    ["synth-overfit", "--batch-size", "0"],
])
def test_usage_errors(argv):
    assert main(argv) == 2


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[1]")
    assert main(["varapprox", "--config", str(bad)]) == 2
    bad.write_text('{"unknown_key": 1}')
    assert main(["varapprox", "--config", str(bad)]) == 2


def test_help_and_version(capsys):
    assert main(["--help"]) == 0
    assert main(["--version"]) == 0
    assert "pnec" in capsys.readouterr().out


# ---------------------------------------------------------------- determinism


def _run_all(root, small_cfg, noise_free):
    corr, gt = noise_free
    runs = {
        "overfit": ["synth-overfit", "--config", small_cfg, *LEARN],
        "diverse": ["synth-diverse", "--config", small_cfg, *LEARN],
        "estimate": ["estimate", str(corr)],
        "eval": ["eval", str(gt), str(gt)],
        "gradcheck": ["gradcheck", "--quick"],
        "varapprox": ["varapprox", "--samples", "4000", "--focals", "720"],
        "problem": ["synth-problem", "--n-points", "20"],
    }
    out = {}
    for name, argv in runs.items():
        d = root / name
        assert main([*argv, "--seed", "7", "--out", str(d)] if name != "eval" else [*argv, "--out", str(d)]) == 0
        out.update({f"{name}/{p.name}": p.read_bytes() for p in sorted(d.iterdir())})
    return out


def test_all_commands_byte_identical_across_runs_and_threads(tmp_path, small_cfg, noise_free_csv, monkeypatch):
    gt = tmp_path / "gt.txt"
    gt.write_text(format_poses(_traj([0.01, -0.02, 0.03])))
    inputs = (noise_free_csv[0], gt)
    results = []
    for k, threads in enumerate(("1", "4", "1")):
        monkeypatch.setenv("PNEC_NUM_THREADS", threads)
        results.append(_run_all(tmp_path / f"run{k}", small_cfg, inputs))
    assert len(results[0]) >= 20
    assert results[0] == results[1] == results[2]
