"""Analytic derivatives of the whitened PNEC residual and implicit pose gradients.

Rotation derivatives are taken with respect to a left perturbation
``exp(skew(x)) @ R`` at ``x = 0``. Translation derivatives are either ambient
(``d/dt`` in R^3) or expressed in a 2-dof tangent chart
``t(delta) = normalize(t + B @ delta)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import fused
from . import kernels as K
from .energy import PnecProblem, RelativePose
from .geometry import (
    Camera,
    normalize,
    pullback_cov_gradient,
    so3_exp,
    so3_left_jacobian,
    so3_log,
    tangent_basis,
)

log = logging.getLogger(__name__)

# Mutation hook for the verification CLI: names listed here get a corrupted
# derivative so the check suite can prove it catches the breach.
KNOWN_FAULTS = frozenset({"dn_dx_sign"})
FAULTS: set[str] = set()  # test hook: names from KNOWN_FAULTS switch on deliberate bugs


class DerivativeUndefinedError(ValueError):
    """The angular-distance derivative is undefined at 0 and pi."""


class SingularHessianError(np.linalg.LinAlgError):
    def __init__(self, msg, condition_number):
        super().__init__(msg)
        self.condition_number = condition_number


@dataclass
class ResidualJacobians:
    """Components of ``e_s = e / sqrt(d_cov + d_covp + reg)`` and their derivatives.

    ``n`` is the squared NEC residual; ``dn_dx`` its rotation gradient.
    """

    e: np.ndarray
    n: np.ndarray
    d_Sigma: np.ndarray
    d_SigmaP: np.ndarray
    sigma_s: np.ndarray
    dn_dx: np.ndarray
    ddSigma_dx: np.ndarray
    ddSigmaP_dx: np.ndarray
    des_dx: np.ndarray
    des_dSigma: np.ndarray
    des_dSigmaP: np.ndarray


def _parts(R, t, f, fp, cov, covp):
    """Residual pieces and their rotation / ambient-translation derivatives, stacked."""
    Rc, tc = K.pose_components(R, t)
    P = K.pnec_terms_with_grads(Rc, tc, K.PointData(f, fp, cov, covp))
    if "dn_dx_sign" in FAULTS:
        P["de_dx"] = K.scale(P["de_dx"], -1.0)
    return {k: (K.join(v) if isinstance(v, tuple) else v) for k, v in P.items()}


def residual_jacobians(pose: RelativePose, f, fp, cov, covp, regularization: float = 1e-13) -> ResidualJacobians:
    """Residual, normal and variance derivatives with respect to rotation and both covariances, batched."""
    P = _parts(pose.R, pose.t, np.asarray(f, float), np.asarray(fp, float),
               np.asarray(cov, float), np.asarray(covp, float))
    var = P["d1"] + P["d2"] + regularization
    if np.any(var <= 0):
        raise ZeroDivisionError("zero residual variance without regularization")
    s = np.sqrt(var)
    e = P["e"]
    k = (-e / (2.0 * s**3))[..., None]
    des_dx = P["de_dx"] / s[..., None] + k * (P["dd1_dx"] + P["dd2_dx"])
    uu = P["u"][..., :, None] * P["u"][..., None, :]
    bb = P["b"][..., :, None] * P["b"][..., None, :]
    return ResidualJacobians(
        e=e,
        n=e**2,
        d_Sigma=P["d1"],
        d_SigmaP=P["d2"],
        sigma_s=s,
        dn_dx=2.0 * e[..., None] * P["de_dx"],
        ddSigma_dx=P["dd1_dx"],
        ddSigmaP_dx=P["dd2_dx"],
        des_dx=des_dx,
        des_dSigma=k[..., None] * uu,
        des_dSigmaP=k[..., None] * bb,
    )


# ---------------------------------------------------------------------------
# residual models used by the least-squares solver


class ResidualModel:
    """Whitened residuals ``r`` and their 5-dof Jacobian for LM.

    Subclasses implement ``_grads(Rc, tc)`` returning the residuals and the
    component-form derivatives ``(dr_dx, dr_dt)``.
    """

    def residuals(self, R, t) -> np.ndarray:  # (..., N)
        raise NotImplementedError

    def _grads(self, Rc, tc):
        raise NotImplementedError

    def take(self, idx) -> ResidualModel:
        """Restrict to a subset of the leading batch axis."""
        raise NotImplementedError

    def energy(self, R, t) -> np.ndarray:
        r = self.residuals(R, t)
        return np.sum(r * r, axis=-1)

    def residuals_and_grads(self, R, t):
        """Residuals plus ambient derivatives ``(dr_dx, dr_dt)``, each ``(..., N, 3)``."""
        r, dx, dt = self._grads(*K.pose_components(R, t))
        J = np.stack([*dx, *dt], axis=-1)
        return r, J[..., :3], J[..., 3:]

    def normal_equations(self, R, t, idx=None):
        """Energy, ``J^T J`` and ``J^T r`` with ``J`` the ambient ``(x, t)`` Jacobian.

        ``idx`` selects problems of the leading batch axis (``R``, ``t`` hold
        one pose per selected problem).
        """
        fast = self._fused(R, t, idx)
        if fast is not None:
            return fast
        sub = self if idx is None else self.take(idx)
        r, dx, dt = sub.residuals_and_grads(R, t)
        J = np.concatenate([dx, dt], axis=-1)
        Jt = np.swapaxes(J, -1, -2)
        return np.sum(r * r, axis=-1), Jt @ J, (Jt @ r[..., None])[..., 0]

    def _fused(self, R, t, idx):
        return None

    def _fused_call(self, kernel, R, t, idx, data):
        """Shape plumbing around a compiled kernel; None when it does not apply."""
        if not fused.AVAILABLE or FAULTS:
            return None
        R = np.asarray(R, dtype=float)
        t = np.asarray(t, dtype=float)
        if R.ndim not in (2, 3):
            return None
        single = R.ndim == 2
        Rb = np.ascontiguousarray(R.reshape(-1, 3, 3))
        tb = np.ascontiguousarray(t.reshape(-1, 3))
        nb = data[0].shape[0]
        if idx is None:
            idx = np.arange(Rb.shape[0]) if nb == Rb.shape[0] else None
        if nb == 1:
            idx = np.zeros(Rb.shape[0], dtype=np.int64)
        if idx is None or len(idx) != Rb.shape[0]:
            return None
        E, G, gv = kernel(Rb, tb, *data, np.asarray(idx, dtype=np.int64))
        return (E[0], G[0], gv[0]) if single else (E, G, gv)

    def residuals_and_jacobian(self, R, t, B):
        r, dx, dt = self._grads(*K.pose_components(R, t))
        B = np.asarray(B, dtype=float)
        dd = [sum(dt[i] * B[..., i, k][..., None] for i in range(3)) for k in range(2)]
        return r, np.stack([*dx, *dd], axis=-1)


class SymmetricPnecModel(ResidualModel):
    def __init__(self, problem: PnecProblem, regularization: float = 1e-13, asymmetric: bool = False,
                 _points=None):
        self.problem = problem
        self.reg = regularization
        self.asymmetric = asymmetric
        if _points is None:
            _points = K.PointData(problem.f, problem.fp, problem.cov, problem.covp)
            if asymmetric:
                _points = _points.without_cov()
        self.points = _points
        self._data = None

    def take(self, idx):
        p = self.problem
        sub = PnecProblem(p.f[idx], p.fp[idx], p.cov[idx], p.covp[idx], p.camera)
        return SymmetricPnecModel(sub, self.reg, self.asymmetric, _points=self.points.take(idx))

    def _fused(self, R, t, idx):
        if self._data is None:
            p = self.problem
            cov = np.zeros_like(p.cov) if self.asymmetric else p.cov
            arrs = [np.asarray(a, dtype=float) for a in (p.f, p.fp, cov, p.covp)]
            if arrs[0].ndim == 2:
                arrs = [a[None] for a in arrs]
            if arrs[0].ndim != 3:
                return None
            self._data = tuple(np.ascontiguousarray(a) for a in arrs)
        return self._fused_call(
            lambda *a: fused.pnec_normal_equations(*a[:6], self.reg, a[6]), R, t, idx, self._data)

    def residuals(self, R, t):
        e, d1, d2 = K.pnec_terms(*K.pose_components(R, t), self.points)
        return e / np.sqrt(d1 + d2 + self.reg)

    def _grads(self, Rc, tc):
        r, dx, dt = K.whitened_grads(Rc, tc, self.points, self.reg)
        if "dn_dx_sign" in FAULTS:
            # flip the de/dx contribution only: dx = (de/dx) / s + variance terms
            P = K.pnec_terms_with_grads(Rc, tc, self.points)
            inv_s = 1.0 / np.sqrt(P["d1"] + P["d2"] + self.reg)
            dx = K.add(dx, K.scale(P["de_dx"], -2.0 * inv_s))
        return r, dx, dt

    def cov_gradients(self, R, t):
        """Analytic ``dE/dcov`` and ``dE/dcovp`` per correspondence."""
        P = _parts(R, t, self.problem.f, self.problem.fp,
                   np.zeros_like(self.problem.cov) if self.asymmetric else self.problem.cov, self.problem.covp)
        var = P["d1"] + P["d2"] + self.reg
        c = -(P["e"] ** 2) / var**2
        uu = P["u"][..., :, None] * P["u"][..., None, :]
        bb = P["b"][..., :, None] * P["b"][..., None, :]
        return c[..., None, None] * uu, c[..., None, None] * bb


class NecLsModel(ResidualModel):
    def __init__(self, problem: PnecProblem, weights=None, _points=None):
        self.problem = problem
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        self.points = _points or K.PointData(problem.f, problem.fp, problem.cov, problem.covp)
        self._data = None

    def take(self, idx):
        p = self.problem
        w = None if self.weights is None else self.weights[idx]
        sub = PnecProblem(p.f[idx], p.fp[idx], p.cov[idx], p.covp[idx], p.camera)
        return NecLsModel(sub, w, _points=self.points.take(idx))

    def _fused(self, R, t, idx):
        if self._data is None:
            p = self.problem
            w = np.ones(p.f.shape[:-1]) if self.weights is None else np.broadcast_to(self.weights, p.f.shape[:-1])
            arrs = [np.asarray(a, dtype=float) for a in (p.f, p.fp, w)]
            if arrs[0].ndim == 2:
                arrs = [a[None] for a in arrs]
            if arrs[0].ndim != 3:
                return None
            self._data = tuple(np.ascontiguousarray(a) for a in arrs)
        return self._fused_call(fused.nec_normal_equations, R, t, idx, self._data)

    def _scale(self):
        return 1.0 if self.weights is None else np.sqrt(self.weights)

    def residuals(self, R, t):
        e, _, _ = K.nec_terms(*K.pose_components(R, t), self.points)
        return self._scale() * e

    def _grads(self, Rc, tc):
        e, g, a = K.nec_terms(Rc, tc, self.points)
        s = self._scale()
        de_dx = _nec_rotation_grad(g, a)
        return s * e, K.scale(de_dx, s), K.scale(K.cross(self.points.f, g), s)


def _nec_rotation_grad(g, a):
    de_dx = K.cross(g, a)
    return K.scale(de_dx, -1.0) if "dn_dx_sign" in FAULTS else de_dx


# ---------------------------------------------------------------------------
# rotation loss


def grad_erot_wrt_pose(R_est, R_gt) -> np.ndarray:
    """Gradient of ``angle(R_gt^T R_est)`` under a left perturbation of ``R_est``.

    Unit norm wherever defined.
    """
    omega = so3_log(np.swapaxes(np.asarray(R_gt), -1, -2) @ np.asarray(R_est))
    theta = np.linalg.norm(omega, axis=-1)
    if np.any((theta < 1e-9) | (theta > np.pi - 1e-9)):
        raise DerivativeUndefinedError(f"rotation error {theta} outside (1e-9, pi - 1e-9)")
    return np.einsum("...ij,...j->...i", R_gt, omega / theta[..., None])


def _grad_erot_masked(R_est, R_gt):
    omega = so3_log(np.swapaxes(R_gt, -1, -2) @ R_est)
    theta = np.linalg.norm(omega, axis=-1)
    ok = (theta > 1e-9) & (theta < np.pi - 1e-9)
    safe = np.where(ok, theta, 1.0)
    g = np.einsum("...ij,...j->...i", R_gt, omega / safe[..., None])
    return np.where(ok[..., None], g, 0.0), ok


# ---------------------------------------------------------------------------
# implicit differentiation of the argmin


def chart_gradient(model: ResidualModel, R0, t0, B, theta) -> np.ndarray:
    """Exact gradient of ``E(exp(x) R0, normalize(t0 + B delta))`` at ``theta = (x, delta)``."""
    x, d = theta[..., :3], theta[..., 3:]
    R = so3_exp(x) @ R0
    m = t0 + np.einsum("...ij,...j->...i", B, d)
    nm = np.linalg.norm(m, axis=-1, keepdims=True)
    t = m / nm
    _, _, jr = model.normal_equations(R, t)
    g_left = 2.0 * jr[..., :3]
    g_amb = 2.0 * jr[..., 3:]
    Jl = so3_left_jacobian(x)
    g_x = np.einsum("...ji,...j->...i", Jl, g_left)
    proj = g_amb - np.sum(g_amb * t, axis=-1, keepdims=True) * t
    g_d = np.einsum("...ij,...i->...j", B, proj) / nm
    return np.concatenate([g_x, g_d], axis=-1)


def pose_hessian(model: ResidualModel, R, t, B, step: float = 1e-6) -> np.ndarray:
    """Central differences of the analytic chart gradient."""
    batch = np.asarray(t).shape[:-1]
    H = np.empty(batch + (5, 5))
    for k in range(5):
        th = np.zeros(batch + (5,))
        th[..., k] = step
        gp = chart_gradient(model, R, t, B, th)
        gm = chart_gradient(model, R, t, B, -th)
        H[..., :, k] = (gp - gm) / (2.0 * step)
    return 0.5 * (H + np.swapaxes(H, -1, -2))


@dataclass
class ImplicitGradient:
    """Loss gradients with respect to the bearing covariances of each point."""

    dL_dcov: np.ndarray  # (..., N, 3, 3)
    dL_dcovp: np.ndarray
    loss: np.ndarray  # e_rot per problem
    valid: np.ndarray  # False where the sample was skipped
    ridge: np.ndarray  # diagonal ridge applied to the Hessian (0 if none)
    condition_number: np.ndarray


def _solve_sym(H, rhs, max_cond=1e12):
    """Symmetric solve with a diagonal ridge when badly conditioned."""
    w = np.linalg.eigvalsh(H)
    aw = np.abs(w)
    cond = aw.max(axis=-1) / np.maximum(aw.min(axis=-1), 1e-300)
    ridge = np.where(cond > max_cond, 1e-12 * np.maximum(aw.max(axis=-1), 1.0), 0.0)
    Hr = H + ridge[..., None, None] * np.eye(H.shape[-1])
    return np.linalg.solve(Hr, rhs[..., None])[..., 0], ridge, cond


def implicit_covariance_gradient(
    problem: PnecProblem,
    R_star,
    t_star,
    R_gt,
    regularization: float = 1e-13,
    rotation_only: bool = False,
    step: float = 1e-6,
    strict: bool = False,
) -> ImplicitGradient:
    """``dL/dcov`` of ``L = e_rot(argmin E_s, R_gt)`` by the implicit function theorem.

    The stationarity condition of the symmetric energy in the 5-dof chart
    around ``(R_star, t_star)`` is differentiated; only the rotation part of
    the loss gradient is non-zero. ``rotation_only`` keeps the translation
    fixed and uses the 3x3 rotation block only.

    Batched over leading axes. Samples with undefined rotation-error
    derivative get zero gradient and ``valid=False``. With ``strict=True`` a
    singular Hessian raises :class:`SingularHessianError` instead of being
    ridged.
    """
    R_star = np.asarray(R_star, float)
    R_gt = np.asarray(R_gt, float)
    gL, ok = _grad_erot_masked(R_star, R_gt)
    loss = np.linalg.norm(so3_log(np.swapaxes(R_gt, -1, -2) @ R_star), axis=-1)
    return implicit_gradient_from_rotation_grad(problem, R_star, t_star, gL, ok, loss, regularization,
                                                rotation_only, step, strict)


def implicit_gradient_from_rotation_grad(
    problem: PnecProblem,
    R_star,
    t_star,
    grad_rot,
    valid,
    loss,
    regularization: float = 1e-13,
    rotation_only: bool = False,
    step: float = 1e-6,
    strict: bool = False,
) -> ImplicitGradient:
    """Implicit covariance gradient for any loss with left-rotation gradient ``grad_rot``."""
    R_star = np.asarray(R_star, float)
    t_star = np.asarray(t_star, float)
    ok = np.asarray(valid, bool)
    model = SymmetricPnecModel(problem, regularization)
    B = tangent_basis(t_star)
    dims = 3 if rotation_only else 5

    H = pose_hessian(model, R_star, t_star, B, step=step)[..., :dims, :dims]
    rhs = np.zeros(H.shape[:-1])
    rhs[..., :3] = np.where(ok[..., None], grad_rot, 0.0)
    if strict:
        cond = np.linalg.cond(H)
        if np.any(~np.isfinite(cond) | (cond > 1e12)):
            raise SingularHessianError("pose Hessian is singular", cond)
    w, ridge, cond = _solve_sym(H, rhs)

    # mixed term: directional derivative of dE/dcov along w, by central differences
    wn = np.linalg.norm(w, axis=-1)
    scale = np.where(wn > 0, wn, 1.0)
    direction = np.zeros(w.shape[:-1] + (5,))
    direction[..., :dims] = w / scale[..., None]
    Rp, tp = _chart_point(R_star, t_star, B, step * direction)
    Rm, tm = _chart_point(R_star, t_star, B, -step * direction)
    Gp, Gpp = model.cov_gradients(Rp, tp)
    Gm, Gpm = model.cov_gradients(Rm, tm)
    k = (-scale / (2.0 * step))
    k = np.where(ok & (wn > 0), k, 0.0)[..., None, None, None]
    return ImplicitGradient(
        dL_dcov=k * (Gp - Gm),
        dL_dcovp=k * (Gpp - Gpm),
        loss=np.asarray(loss, float),
        valid=ok,
        ridge=ridge,
        condition_number=cond,
    )


def _chart_point(R, t, B, theta):
    Rn = so3_exp(theta[..., :3]) @ R
    tn = normalize(t + np.einsum("...ij,...j->...i", B, theta[..., 3:]))
    return Rn, tn


# ---------------------------------------------------------------------------
# covariance parameterization


def f_scale(x):
    """``(1 + |x|)^sign(x)``: positive, C1, equals 1 at 0."""
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 1.0 + x, 1.0 / (1.0 - np.minimum(x, 0.0)))


def f_scale_inv(s):
    s = np.asarray(s, dtype=float)
    return np.where(s >= 1, s - 1.0, 1.0 - 1.0 / s)


def f_scale_grad(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 1.0, 1.0 / (1.0 - np.minimum(x, 0.0)) ** 2)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass
class CovarianceParams:
    """Unconstrained ``(s_raw, alpha_raw, beta_raw)`` arrays of equal shape."""

    s_raw: np.ndarray
    alpha_raw: np.ndarray
    beta_raw: np.ndarray

    def __post_init__(self):
        self.s_raw = np.asarray(self.s_raw, dtype=float)
        self.alpha_raw = np.asarray(self.alpha_raw, dtype=float)
        self.beta_raw = np.asarray(self.beta_raw, dtype=float)

    @classmethod
    def from_values(cls, s, alpha, beta) -> CovarianceParams:
        return cls(f_scale_inv(s), np.asarray(alpha, float), logit(beta))

    @classmethod
    def isotropic(cls, n: int, scale: float = 1.0) -> CovarianceParams:
        """Scaled identity ``scale * I``: trace ``2 * scale``, beta = 1/2."""
        return cls.from_values(np.full(n, 2.0 * scale), np.zeros(n), np.full(n, 0.5))

    @property
    def s(self):
        return f_scale(self.s_raw)

    @property
    def alpha(self):
        return self.alpha_raw

    @property
    def beta(self):
        return sigmoid(self.beta_raw)

    def as_array(self) -> np.ndarray:
        return np.stack([self.s_raw, self.alpha_raw, self.beta_raw], axis=-1)

    @classmethod
    def from_array(cls, a) -> CovarianceParams:
        a = np.asarray(a, dtype=float)
        return cls(a[..., 0], a[..., 1], a[..., 2])

    def covariance(self) -> np.ndarray:
        return cov2d_from_params(self.s, self.alpha, self.beta)


def cov2d_from_params(s, alpha, beta) -> np.ndarray:
    """``s * R(alpha) diag(beta, 1 - beta) R(alpha)^T``."""
    s, alpha, beta = (np.asarray(v, dtype=float) for v in (s, alpha, beta))
    c, sn = np.cos(alpha), np.sin(alpha)
    l1, l2 = s * beta, s * (1.0 - beta)
    xx = l1 * c * c + l2 * sn * sn
    yy = l1 * sn * sn + l2 * c * c
    xy = (l1 - l2) * c * sn
    return np.stack([np.stack([xx, xy], -1), np.stack([xy, yy], -1)], -2)


def cov2d_to_params(cov):
    """Inverse of :func:`cov2d_from_params`: ``(s, alpha, beta)`` with alpha on the larger eigenvector."""
    w, V = np.linalg.eigh(np.asarray(cov, dtype=float))
    s = w.sum(axis=-1)
    beta = w[..., 1] / np.where(s > 0, s, 1.0)
    alpha = np.arctan2(V[..., 1, 1], V[..., 0, 1])
    return s, alpha, beta


def chain_to_params(dL_dcov2d, params: CovarianceParams) -> np.ndarray:
    """Pull a symmetric ``dL/dSigma_2D`` back to ``(s_raw, alpha_raw, beta_raw)``."""
    G = np.asarray(dL_dcov2d, dtype=float)
    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    s, a, b = params.s, params.alpha, params.beta
    c, sn = np.cos(a), np.sin(a)
    # dSigma/ds, dSigma/dalpha, dSigma/dbeta as (xx, xy, yy)
    ds = np.stack([b * c * c + (1 - b) * sn * sn, (2 * b - 1) * c * sn, b * sn * sn + (1 - b) * c * c], -1)
    dal = s[..., None] * (2 * b - 1)[..., None] * np.stack([-2 * c * sn, c * c - sn * sn, 2 * c * sn], -1)
    dbe = s[..., None] * np.stack([c * c - sn * sn, 2 * c * sn, sn * sn - c * c], -1)
    gvec = np.stack([G[..., 0, 0], 2.0 * G[..., 0, 1], G[..., 1, 1]], -1)
    out = np.stack(
        [
            np.sum(gvec * ds, -1) * f_scale_grad(params.s_raw),
            np.sum(gvec * dal, -1),
            np.sum(gvec * dbe, -1) * b * (1 - b),
        ],
        -1,
    )
    return out


def params_gradient(dL_dcov3, p, cam: Camera, params: CovarianceParams) -> np.ndarray:
    """Bearing-space covariance gradient to parameter gradient."""
    return chain_to_params(pullback_cov_gradient(dL_dcov3, p, cam), params)
