"""NEC residual, PNEC residual variances and energies.

Per-correspondence arrays carry a trailing point axis ``N``; poses may carry
the same leading batch dimensions as the problem (``R: (..., 3, 3)``,
``t: (..., 3)``, ``f: (..., N, 3)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, is_rotation, propagate_cov, skew, unproject

# Levi-Civita tensor; (a x b)_i = eps_ijk a_j b_k
_EPS = np.zeros((3, 3, 3))
_EPS[0, 1, 2] = _EPS[1, 2, 0] = _EPS[2, 0, 1] = 1.0
_EPS[0, 2, 1] = _EPS[2, 1, 0] = _EPS[1, 0, 2] = -1.0


class IllPosedEnergyError(ValueError):
    """Every residual variance (plus regularization) is zero."""


@dataclass(frozen=True)
class RelativePose:
    """Rotation and unit translation direction of frame 2 expressed in frame 1.

    A point ``X2`` in frame 2 maps to frame 1 as ``R @ X2 + s * t``.
    """

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        t = np.asarray(self.t, dtype=float)
        n = np.linalg.norm(t)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("expected R of shape (3, 3) and t of shape (3,)")
        if not is_rotation(R, tol=1e-9):
            raise ValueError("R is not a rotation matrix")
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"t must be unit norm, got |t|={n}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t / n)

    @classmethod
    def identity(cls) -> RelativePose:
        return cls(np.eye(3), np.array([0.0, 0.0, 1.0]))


@dataclass(frozen=True)
class EnergyConfig:
    regularization: float = 1e-13

    def __post_init__(self):
        if self.regularization < 0:
            raise ValueError("regularization must be non-negative")


@dataclass
class Correspondences:
    """Matched pixels with their image-plane noise covariances."""

    p1: np.ndarray  # (N, 2)
    p2: np.ndarray  # (N, 2)
    cov1: np.ndarray  # (N, 2, 2)
    cov2: np.ndarray  # (N, 2, 2)

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=float)
        self.p2 = np.asarray(self.p2, dtype=float)
        self.cov1 = np.asarray(self.cov1, dtype=float)
        self.cov2 = np.asarray(self.cov2, dtype=float)

    def __len__(self):
        return self.p1.shape[-2]

    def subset(self, mask) -> Correspondences:
        return Correspondences(self.p1[mask], self.p2[mask], self.cov1[mask], self.cov2[mask])


@dataclass
class PnecProblem:
    """Unit bearings with their propagated 3x3 covariances.

    ``f`` and ``fp`` are ``(..., N, 3)``; ``cov``/``covp`` are ``(..., N, 3, 3)``.
    """

    f: np.ndarray
    fp: np.ndarray
    cov: np.ndarray
    covp: np.ndarray
    camera: Camera | None = field(default=None, compare=False)

    @classmethod
    def from_correspondences(cls, corrs: Correspondences, cam: Camera) -> PnecProblem:
        return cls(
            f=unproject(corrs.p1, cam),
            fp=unproject(corrs.p2, cam),
            cov=propagate_cov(corrs.p1, corrs.cov1, cam),
            covp=propagate_cov(corrs.p2, corrs.cov2, cam),
            camera=cam,
        )

    @property
    def n_points(self) -> int:
        return self.f.shape[-2]

    def subset(self, mask) -> PnecProblem:
        return PnecProblem(self.f[mask], self.fp[mask], self.cov[mask], self.covp[mask], self.camera)


def _pose_axes(R, t):
    """Insert the point axis so a batch pose broadcasts over correspondences."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    return R[..., None, :, :], t[..., None, :]


def _matvec(M, v):
    return np.sum(M * v[..., None, :], axis=-1)


def _quad(v, M):
    return np.sum(v * _matvec(M, v), axis=-1)


def nec_residual(R, t, f, fp) -> np.ndarray:
    """``t . (f x R fp)``; zero iff t, f and R fp are coplanar."""
    R, t = _pose_axes(R, t)
    g = _matvec(R, np.asarray(fp, dtype=float))
    return np.sum(t * np.cross(f, g), axis=-1)


def variance_parts(R, t, f, fp, cov, covp):
    """The two quadratic forms of the symmetric variance.

    Returns ``(d_cov, d_covp)`` with ``d_cov = u^T cov u``, ``u = R fp x t`` and
    ``d_covp = a^T R covp R^T a``, ``a = t x f``.
    """
    R, t = _pose_axes(R, t)
    g = _matvec(R, np.asarray(fp, dtype=float))
    u = np.cross(g, t)
    a = np.cross(t, f)
    b = _matvec(np.swapaxes(R, -1, -2), a)
    return _quad(u, cov), _quad(b, covp)


def variance_asym(R, t, f, covp) -> np.ndarray:
    """Residual variance with noise in the second frame only."""
    R, t = _pose_axes(R, t)
    a = np.cross(t, f)
    b = _matvec(np.swapaxes(R, -1, -2), a)
    return _quad(b, covp)


def variance_sym(R, t, f, fp, cov, covp) -> np.ndarray:
    """Residual variance with noise in both frames (first-order)."""
    d1, d2 = variance_parts(R, t, f, fp, cov, covp)
    return d1 + d2


def cross_covariance(cov_a, cov_b) -> np.ndarray:
    """Covariance of ``a x b`` for independent zero-mean ``a``, ``b``."""
    return np.einsum("ijk,mnl,...jn,...kl->...im", _EPS, _EPS, cov_a, cov_b)


def sigma_n_full(R, f, fp, cov, covp, include_cross: bool = True) -> np.ndarray:
    """Exact covariance of the epipolar normal ``(f + n) x R (fp + n')``.

    With ``include_cross=False`` the bilinear noise term is dropped, which is
    the matrix whose quadratic form in ``t`` is :func:`variance_sym`.
    """
    R = np.asarray(R, dtype=float)[..., None, :, :]
    g = _matvec(R, np.asarray(fp, dtype=float))
    Sp = R @ covp @ np.swapaxes(R, -1, -2)
    G = skew(g)
    F = skew(f)
    out = G @ cov @ np.swapaxes(G, -1, -2) + F @ Sp @ np.swapaxes(F, -1, -2)
    if include_cross:
        out = out + cross_covariance(cov, Sp)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _sum_terms(num, den, reg):
    den = den + reg
    if np.any(np.all(den == 0, axis=-1)):
        raise IllPosedEnergyError("all residual variances are zero; set a positive regularization")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.sum(terms, axis=-1)


def energy_sym(R, t, problem: PnecProblem, cfg: EnergyConfig | None = None) -> np.ndarray:
    """Symmetric PNEC energy ``sum e^2 / (sigma_s^2 + reg)``."""
    cfg = cfg or EnergyConfig()
    e = nec_residual(R, t, problem.f, problem.fp)
    var = variance_sym(R, t, problem.f, problem.fp, problem.cov, problem.covp)
    return _sum_terms(e**2, var, cfg.regularization)


def energy_asym(R, t, problem: PnecProblem, cfg: EnergyConfig | None = None) -> np.ndarray:
    cfg = cfg or EnergyConfig()
    e = nec_residual(R, t, problem.f, problem.fp)
    var = variance_asym(R, t, problem.f, problem.covp)
    return _sum_terms(e**2, var, cfg.regularization)


def energy_nec_ls(R, t, problem: PnecProblem, weights=None) -> np.ndarray:
    """Unit-weighted (or optionally weighted) sum of squared NEC residuals."""
    e = nec_residual(R, t, problem.f, problem.fp)
    if weights is not None:
        e2 = np.asarray(weights, dtype=float) * e**2
    else:
        e2 = e**2
    return np.sum(e2, axis=-1)
