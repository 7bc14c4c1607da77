"""Rotation, trajectory and variance error metrics.

RPE1 is the mean consecutive-frame rotational error; RPEn is the rotational
drift between the composed first-to-last rotations. Both are in degrees.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .geometry import rotation_angle


class UndefinedDirectionError(ValueError):
    """Ground-truth translation too short to define a direction."""


@dataclass
class Trajectory:
    """Absolute camera poses ``(R_i, p_i)`` mapping camera ``i`` into the world frame."""

    R: np.ndarray  # (T, 3, 3)
    p: np.ndarray  # (T, 3)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        if self.R.ndim != 3 or self.R.shape[1:] != (3, 3) or self.p.shape != (self.R.shape[0], 3):
            raise ValueError("expected R of shape (T, 3, 3) and p of shape (T, 3)")

    def __len__(self):
        return self.R.shape[0]

    @classmethod
    def from_relative(cls, R_rel, t_rel=None) -> Trajectory:
        """Chain relative poses ``T_{i,i+1}`` starting at the identity."""
        R_rel = np.asarray(R_rel, dtype=float)
        n = R_rel.shape[0]
        t_rel = np.zeros((n, 3)) if t_rel is None else np.asarray(t_rel, dtype=float)
        R = [np.eye(3)]
        p = [np.zeros(3)]
        for Ri, ti in zip(R_rel, t_rel):
            p.append(p[-1] + R[-1] @ ti)
            R.append(R[-1] @ Ri)
        return cls(np.stack(R), np.stack(p))

    def relative_rotations(self) -> np.ndarray:
        return np.swapaxes(self.R[:-1], -1, -2) @ self.R[1:]


def e_rot(R_est, R_gt) -> np.ndarray:
    """Geodesic angle in radians between two rotations (batched)."""
    return rotation_angle(np.swapaxes(np.asarray(R_gt), -1, -2) @ np.asarray(R_est))


def _check_pair(est: Trajectory, gt: Trajectory):
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) < 2:
        raise ValueError("relative metrics need at least two poses")


def rpe1(est: Trajectory, gt: Trajectory) -> float:
    _check_pair(est, gt)
    return float(np.rad2deg(np.mean(e_rot(est.relative_rotations(), gt.relative_rotations()))))


def rpen(est: Trajectory, gt: Trajectory) -> float:
    _check_pair(est, gt)
    end_est = est.R[0].T @ est.R[-1]
    end_gt = gt.R[0].T @ gt.R[-1]
    return float(np.rad2deg(e_rot(end_est, end_gt)))


def e_t(t_est, t_gt, min_norm: float = 1e-3) -> np.ndarray:
    """Sign-invariant angle in degrees between translation directions."""
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    n_gt = np.linalg.norm(t_gt, axis=-1)
    if np.any(n_gt <= min_norm):
        raise UndefinedDirectionError(f"ground-truth translation norm {n_gt.min():.3g} <= {min_norm}")
    c = np.abs(np.sum(t_est * t_gt, axis=-1)) / (np.linalg.norm(t_est, axis=-1) * n_gt)
    return np.rad2deg(np.arccos(np.clip(c, 0.0, 1.0)))


def translation_errors(est: Trajectory, gt: Trajectory, min_norm: float = 1e-3) -> np.ndarray:
    """e_t per consecutive pair; pairs with a near-static ground truth are dropped."""
    _check_pair(est, gt)

    def rel_t(tr):
        return np.einsum("nji,nj->ni", tr.R[:-1], tr.p[1:] - tr.p[:-1])

    te, tg = rel_t(est), rel_t(gt)
    keep = np.linalg.norm(tg, axis=-1) > min_norm
    if not keep.any():
        return np.zeros(0)
    return e_t(te[keep], tg[keep], min_norm)


def normalized_variances(var) -> np.ndarray:
    var = np.asarray(var, dtype=float)
    total = np.sum(var, axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("variance set sums to zero")
    return var.shape[-1] * var / total


def sigma_norm_error(learned, true) -> np.ndarray:
    """Mean absolute difference of unit-mean normalized variances (last axis = points)."""
    return np.mean(np.abs(normalized_variances(learned) - normalized_variances(true)), axis=-1)


def trajectory_table(rows) -> str:
    """CSV text for ``(seq, rpe1_deg, rpen_deg, et_deg)`` rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seq", "rpe1_deg", "rpen_deg", "et_deg"])
    for seq, a, b, c in rows:
        w.writerow([seq, repr(float(a)), repr(float(b)), repr(float(c))])
    return buf.getvalue()
