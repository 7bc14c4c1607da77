"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the pytest terminal summary (see conftest.py) and
when the module is run directly with ``python tests/test_acceptance.py``.
Criteria 4 and 5 train at desk scale and take several minutes each.
"""

import itertools
import json
import time

import numpy as np
import pytest

from pnec.energy import energy_asym, energy_sym
from pnec.experiments import learning_summary, robustness_study
from pnec.geometry import so3_exp
from pnec.io import format_correspondences, format_poses
from pnec.learning import diverse_config, overfit_config, train_covariances
from pnec.metrics import Trajectory, e_rot, rpen, sigma_norm_error
from pnec.montecarlo import VarianceSweepConfig, variance_sweep
from pnec.solver import estimate_pose_multistage
from pnec.synthgen import SceneConfig, generate_problem
from pnec.verification import (
    CheckReport,
    check_chain_to_params,
    check_grad_erot,
    check_implicit_gradient,
    check_residual_jacobians,
    eigen_angle_entropies,
)

RESULTS: list[str] = []


def record(n: int, ok: bool, detail: str):
    RESULTS.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_1_analytic_gradients():
    t0 = time.perf_counter()
    rep = CheckReport()
    check_residual_jacobians(100, seed=0, report=rep)
    check_grad_erot(100, seed=0, report=rep)
    check_chain_to_params(100, seed=0, report=rep)
    ent = eigen_angle_entropies(1000)
    dt = time.perf_counter() - t0
    names = ("dn_dx", "ddSigma_dx", "ddSigmaP_dx", "des_dx", "des_dSigma", "des_dSigmaP")
    worst = max(rep.worst[k] for k in names)
    ok = rep.passed and worst <= 1e-5 and ent["random"] > ent["fixed"] and dt < 10.0
    record(1, ok, f"worst rel err {worst:.2e} (tol 1e-5), entropy fixed {ent['fixed']:.3f} < random "
                  f"{ent['random']:.3f}, {dt:.1f}s")


def test_criterion_2_implicit_gradient():
    t0 = time.perf_counter()
    rep = check_implicit_gradient(20, 20, seed=0)
    dt = time.perf_counter() - t0
    err = max(rep.worst["implicit_dL_dSigma"], rep.worst["implicit_dL_dSigmaP"])
    pairing = rep.worst["scaling_pairing"]
    ok = err <= 1e-3 and pairing <= 1e-6 and dt < 120.0
    record(2, ok, f"oracle rel err {err:.2e} (tol 1e-3), |pairing| {pairing:.2e} (tol 1e-6), {dt:.1f}s")


def test_criterion_3_variance_approximation():
    t0 = time.perf_counter()
    rows = variance_sweep(VarianceSweepConfig(n_samples=1_000_000))
    dt = time.perf_counter() - t0
    by_f = {r.focal: r for r in rows}
    errs = [r.mean_rel_err for r in rows]
    decreasing = all(a > b for a, b in itertools.pairwise(errs))
    worst720 = by_f[720.0].rel_err
    ok = worst720 <= 1e-3 and decreasing and dt < 60.0
    record(3, ok, f"f=720 worst-point rel err {100 * worst720:.4f}% (tol 0.1%), mean rel err by focal "
                  f"{', '.join(f'{e:.1e}' for e in errs)}, {dt:.1f}s")


@pytest.mark.slow
def test_criterion_4_experiment_one():
    t0 = time.perf_counter()
    rec = train_covariances(overfit_config())
    dt = time.perf_counter() - t0
    s = learning_summary(rec)
    ok = s["vs_unit"] <= -0.05 and s["vs_nec_ls"] <= -0.10 and s["sigma_norm_ratio"] < 0.30 and dt < 1800
    record(4, ok, f"e_rot {100 * s['vs_unit']:+.1f}% vs unit covariances, {100 * s['vs_nec_ls']:+.1f}% vs NEC-LS, "
                  f"sigma_norm final/initial {s['sigma_norm_ratio']:.3f}, {dt:.0f}s")


@pytest.mark.slow
def test_criterion_5_experiment_two():
    t0 = time.perf_counter()
    rec = train_covariances(diverse_config(evaluate_baselines=False))
    dt = time.perf_counter() - t0
    ratio = learning_summary(rec)["cov_err_ratio"]
    ok = ratio < 0.25 and dt < 1800
    record(5, ok, f"covariance error final/initial {ratio:.3f} (< 0.25), {dt:.0f}s")


def test_criterion_6_robustness():
    t0 = time.perf_counter()
    res = robustness_study(n_seeds=20, outlier_fraction=0.3)
    dt = time.perf_counter() - t0
    ok = res.mean_recall >= 0.95 and res.error_ratio <= 2.0 and dt < 120.0
    record(6, ok, f"recall {res.mean_recall:.3f}, precision {res.mean_precision:.3f}, "
                  f"error ratio {res.error_ratio:.2f} (<= 2), {dt:.1f}s")


def test_criterion_7_exactness():
    worst_rot = 0.0
    for s in range(100):
        sp = generate_problem(SceneConfig(n_points=30, seed=s, noise_scale_range=(0.0, 0.0)))
        rep = estimate_pose_multistage(sp.bearing_problem(noisy=False))
        worst_rot = max(worst_rot, e_rot(rep.pose.R, sp.R))
    worst_energy = 0.0
    for s in range(20):
        sp = generate_problem(SceneConfig(n_points=50, seed=s))
        P = sp.bearing_problem(cov1=np.zeros_like(sp.cov1))
        R = so3_exp(np.array([0.01, 0.02, -0.01])) @ sp.R
        a, b = energy_sym(R, sp.t, P), energy_asym(R, sp.t, P)
        worst_energy = max(worst_energy, float(abs(a - b) / abs(b)))
    rng = np.random.default_rng(0)
    R_rel = np.stack([so3_exp(0.05 * rng.normal(size=3)) for _ in range(9)])
    est = Trajectory.from_relative(R_rel @ so3_exp(np.array([0.0, 0.0, 1e-3])))
    gt = Trajectory.from_relative(R_rel)
    telescoping = rpen(est, gt) == np.rad2deg(e_rot(est.R[0].T @ est.R[-1], gt.R[0].T @ gt.R[-1]))
    x = rng.uniform(0.1, 3.0, 50)
    scale_exact = all(sigma_norm_error(x, 2.0**k * x) == 0.0 for k in range(-10, 11))
    ok = worst_rot < 1e-6 and worst_energy <= 1e-15 and telescoping and scale_exact
    record(7, ok, f"noise-free worst e_rot {worst_rot:.1e} rad, sym/asym rel diff {worst_energy:.1e}, "
                  f"RPEn telescoping exact={telescoping}, sigma_norm scale invariance exact={scale_exact}")


def test_criterion_8_determinism(tmp_path, monkeypatch):
    from test_cli import SMALL_SCENE, _run_all, _traj

    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps(SMALL_SCENE))
    sp = generate_problem(SceneConfig(n_points=30, seed=11, noise_scale_range=(0.0, 0.0)))
    corr = tmp_path / "corr.csv"
    corr.write_text(format_correspondences(sp.correspondences(noisy=False), with_covariances=False))
    gt = tmp_path / "gt.txt"
    gt.write_text(format_poses(_traj([0.01, -0.02, 0.03])))
    runs = []
    for k, threads in enumerate(("1", "1", "4", "4")):
        monkeypatch.setenv("PNEC_NUM_THREADS", threads)
        runs.append(_run_all(tmp_path / f"run{k}", str(cfg), (corr, gt)))
    ok = all(r == runs[0] for r in runs[1:])
    record(8, ok, f"{len(runs[0])} artifacts from 7 commands byte-identical over 2 runs x threads {{1, 4}}")


def test_criterion_9_not_reproducible_plus_entropy():
    ent = eigen_angle_entropies(1000)
    ok = ent["random"] > ent["fixed"]
    record(9, ok, "KITTI/EuRoC tables NOT REPRODUCED (out of scope: no datasets or feature front end); "
                  f"gradient eigen-angle entropy fixed {ent['fixed']:.3f} < random {ent['random']:.3f}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
