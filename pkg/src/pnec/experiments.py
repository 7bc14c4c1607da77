"""Experiment drivers shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .learning import LearningRecord
from .metrics import e_rot
from .solver import SolverConfig, estimate_pose_multistage
from .synthgen import SceneConfig, generate_problem, inject_outliers

# Sampson-normalized residual with MSAC scoring; see README for why the
# plain NEC inlier count is not enough once outliers land near the epipole.
ROBUST_SOLVER = SolverConfig(ransac_threshold=1e-5, ransac_residual="sampson", ransac_cost="msac")


@dataclass
class RobustnessResult:
    recall: np.ndarray  # per seed, inliers kept / true inliers
    precision: np.ndarray
    clean_error: np.ndarray  # rad, outlier-free run
    outlier_error: np.ndarray  # rad, same scene with outliers injected
    config: SolverConfig = field(default_factory=SolverConfig)

    @property
    def mean_recall(self) -> float:
        return float(np.mean(self.recall))

    @property
    def mean_precision(self) -> float:
        return float(np.mean(self.precision))

    @property
    def error_ratio(self) -> float:
        """Mean rotation error with outliers over mean error without."""
        return float(np.mean(self.outlier_error) / np.mean(self.clean_error))

    def csv(self) -> str:
        rows = ["seed,recall,precision,clean_e_rot,outlier_e_rot"]
        for i, vals in enumerate(zip(self.recall, self.precision, self.clean_error, self.outlier_error)):
            rows.append(",".join([str(i), *(repr(float(v)) for v in vals)]))
        return "\n".join(rows) + "\n"


def robustness_study(n_seeds: int = 20, outlier_fraction: float = 0.3, n_points: int = 100,
                     cfg: SolverConfig = ROBUST_SOLVER, scene: SceneConfig | None = None) -> RobustnessResult:
    """Multi-stage estimates on each scene with and without injected outliers."""
    scene = scene or SceneConfig(n_points=n_points)
    rec, prec, e0, e1 = [], [], [], []
    for s in range(n_seeds):
        sp = generate_problem(replace(scene, seed=s))
        clean = estimate_pose_multistage(sp.bearing_problem(), cfg)
        so = inject_outliers(sp, outlier_fraction, seed=s)
        dirty = estimate_pose_multistage(so.bearing_problem(), cfg)
        good = ~so.outlier
        kept = dirty.inlier_mask & good
        rec.append(kept.sum() / good.sum())
        prec.append(kept.sum() / max(int(dirty.inlier_mask.sum()), 1))
        e0.append(e_rot(clean.pose.R, sp.R))
        e1.append(e_rot(dirty.pose.R, sp.R))
    return RobustnessResult(np.array(rec), np.array(prec), np.array(e0), np.array(e1), cfg)


def learning_summary(rec: LearningRecord) -> dict:
    """Final-versus-baseline and final-versus-initial ratios of a training run."""
    out = {
        "initial_e_rot": rec.initial.mean_e_rot,
        "final_e_rot": rec.final.mean_e_rot,
        "sigma_norm_ratio": rec.final.mean_sigma_norm_err / rec.initial.mean_sigma_norm_err,
        "cov_err_ratio": rec.final.mean_cov_err / rec.initial.mean_cov_err,
    }
    for key, name in (("unit_covariance_e_rot", "vs_unit"), ("nec_ls_e_rot", "vs_nec_ls"),
                      ("true_covariance_e_rot", "vs_true")):
        if key in rec.baselines:
            out[key] = rec.baselines[key]
            out[name] = rec.final.mean_e_rot / rec.baselines[key] - 1.0
    return out
