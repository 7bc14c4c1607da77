"""Finite-difference and re-solve oracles for every analytic derivative.

Errors are reported relative to the size of the derivative being checked:
``max|analytic - oracle| / max|oracle|`` per derivative and configuration,
so entries that are legitimately near zero do not produce spurious
blow-ups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import PnecProblem, RelativePose
from .geometry import (
    normalize,
    pullback_with_jacobian,
    so3_exp,
    sphere_retract,
    tangent_basis,
    unproject_jacobian,
)
from .gradients import (
    CovarianceParams,
    ResidualJacobians,
    SymmetricPnecModel,
    chain_to_params,
    grad_erot_wrt_pose,
    implicit_covariance_gradient,
    residual_jacobians,
)
from .metrics import e_rot
from .rng import make_rng
from .solver import lm_minimize, perturb_pose
from .synthgen import SceneConfig, batch_bearing_problem, generate_problem, sample_batch

TOLERANCES = {
    "dn_dx": 1e-5,
    "ddSigma_dx": 1e-5,
    "ddSigmaP_dx": 1e-5,
    "des_dx": 1e-5,
    "des_dSigma": 1e-5,
    "des_dSigmaP": 1e-5,
    "grad_erot": 1e-6,
    "chain_to_params": 1e-6,
    "implicit_dL_dSigma": 1e-3,
    "implicit_dL_dSigmaP": 1e-3,
    "scaling_pairing": 1e-6,
}


@dataclass
class CheckReport:
    worst: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=lambda: dict(TOLERANCES))

    def update(self, name, err):
        self.worst[name] = max(self.worst.get(name, 0.0), float(err))

    @property
    def breaches(self) -> list:
        return [k for k, v in self.worst.items() if not v <= self.tolerances[k]]

    @property
    def passed(self) -> bool:
        return not self.breaches

    def lines(self) -> list[str]:
        out = []
        for k in sorted(self.worst):
            status = "ok" if self.worst[k] <= self.tolerances[k] else "BREACH"
            out.append(f"{k:22s} worst={self.worst[k]:.3e} tol={self.tolerances[k]:.0e} {status}")
        return out


def _rel(a, b) -> float:
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    scale = np.max(np.abs(b))
    err = np.max(np.abs(a - b))
    if scale == 0:
        return float(err)
    return float(err / scale)


def _random_psd(rng, scale=1.0):
    A = rng.normal(size=(3, 3))
    return scale * (A @ A.T / 3.0 + 0.1 * np.eye(3))


def random_configuration(rng):
    """Generic pose, bearings and full-rank O(1) bearing covariances."""
    R = so3_exp(rng.normal(size=3) * 0.5)
    t = normalize(rng.normal(size=3))
    f = normalize(rng.normal(size=3))
    fp = normalize(rng.normal(size=3))
    return RelativePose(R, t), f, fp, _random_psd(rng), _random_psd(rng)


def _jac(pose, f, fp, cov, covp, reg) -> ResidualJacobians:
    return residual_jacobians(pose, f, fp, cov, covp, reg)


def _fd_rotation(fn, pose, h):
    out = []
    for k in range(3):
        d = np.zeros(3)
        d[k] = h
        plus = fn(RelativePose(so3_exp(d) @ pose.R, pose.t))
        minus = fn(RelativePose(so3_exp(-d) @ pose.R, pose.t))
        out.append((np.ravel(plus) - np.ravel(minus)) / (2.0 * h))
    return np.array(out).T


def _fd_matrix(fn, M, h):
    out = np.zeros((3, 3))
    for i in range(3):
        for j in range(i, 3):
            D = np.zeros((3, 3))
            D[i, j] += 0.5
            D[j, i] += 0.5
            out[i, j] = out[j, i] = np.squeeze(fn(M + h * D) - fn(M - h * D)) / (2.0 * h)
    return out


def check_residual_jacobians(n_configs: int = 100, seed: int = 0, reg: float = 1e-13,
                             report: CheckReport | None = None) -> CheckReport:
    """Central differences: step 1e-6 on the rotation, 1e-7 on symmetric covariance entries."""
    report = report or CheckReport()
    for c in range(n_configs):
        rng = make_rng(seed, "gradcheck", "residual", c)
        pose, f, fp, cov, covp = random_configuration(rng)
        J = _jac(pose, f, fp, cov, covp, reg)

        def field_at(name, p=pose, s=cov, sp=covp, f=f, fp=fp):
            return getattr(_jac(p, f, fp, s, sp, reg), name)

        report.update("dn_dx", _rel(J.dn_dx, _fd_rotation(lambda p: field_at("n", p), pose, 1e-6)))
        report.update("ddSigma_dx", _rel(J.ddSigma_dx, _fd_rotation(lambda p: field_at("d_Sigma", p), pose, 1e-6)))
        report.update("ddSigmaP_dx",
                      _rel(J.ddSigmaP_dx, _fd_rotation(lambda p: field_at("d_SigmaP", p), pose, 1e-6)))

        def es(p=pose, s=cov, sp=covp, f=f, fp=fp):
            jj = _jac(p, f, fp, s, sp, reg)
            return jj.e / jj.sigma_s

        report.update("des_dx", _rel(J.des_dx, _fd_rotation(lambda p: es(p), pose, 1e-6)))
        report.update("des_dSigma", _rel(J.des_dSigma, _fd_matrix(lambda s: es(s=s), cov, 1e-7)))
        report.update("des_dSigmaP", _rel(J.des_dSigmaP, _fd_matrix(lambda sp: es(sp=sp), covp, 1e-7)))
    return report


def check_grad_erot(n_configs: int = 100, seed: int = 0, report: CheckReport | None = None) -> CheckReport:
    report = report or CheckReport()
    for c in range(n_configs):
        rng = make_rng(seed, "gradcheck", "erot", c)
        R_gt = so3_exp(rng.normal(size=3))
        R = so3_exp(normalize(rng.normal(size=3)) * rng.uniform(0.05, 3.0)) @ R_gt
        g = grad_erot_wrt_pose(R, R_gt)
        h = 1e-6
        fd = np.array([(e_rot(so3_exp(h * e) @ R, R_gt) - e_rot(so3_exp(-h * e) @ R, R_gt)) / (2 * h)
                       for e in np.eye(3)])
        report.update("grad_erot", _rel(g, fd))
    return report


def check_chain_to_params(n_configs: int = 100, seed: int = 0, report: CheckReport | None = None) -> CheckReport:
    report = report or CheckReport()
    for c in range(n_configs):
        rng = make_rng(seed, "gradcheck", "params", c)
        raw = rng.normal(size=3)
        G = rng.normal(size=(2, 2))
        G = 0.5 * (G + G.T)
        params = CovarianceParams(*raw)
        g = chain_to_params(G, params)
        h = 1e-6
        fd = []
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            cp = CovarianceParams(*(raw + d)).covariance()
            cm = CovarianceParams(*(raw - d)).covariance()
            fd.append(np.sum(G * (cp - cm)) / (2 * h))
        report.update("chain_to_params", _rel(g, np.array(fd)))
    return report


def implicit_oracle_problem(seed: int, n_points: int = 20, scale: float = 1.0):
    """A solved synthetic problem for the argmin oracle: ``(problem, R*, t*, R_gt)``."""
    scene = SceneConfig(n_points=n_points, seed=seed)
    sp = generate_problem(scene)
    prob = sp.bearing_problem()
    prob = PnecProblem(prob.f, prob.fp, scale * prob.cov, scale * prob.covp, prob.camera)
    R0, t0 = perturb_pose(sp.R, sp.t, np.deg2rad(1.0), make_rng(seed, "oracle-init"))
    model = SymmetricPnecModel(prob)
    res = lm_minimize(model, R0, t0, max_iterations=500)
    R, t = gauss_newton_polish(model, res.R, res.t)
    return prob, R, t, sp.R


def gauss_newton_polish(model, R, t, iterations: int = 30):
    """Undamped Gauss-Newton from a point already next to the minimizer.

    LM's relative-decrease stop fires long before the pose settles to the
    ~1e-12 accuracy a finite-difference argmin oracle needs, because the
    energy is quadratic in the pose offset.
    """
    R = np.array(R, dtype=float)
    t = normalize(np.array(t, dtype=float))
    for _ in range(iterations):
        _, G6, g6 = model.normal_equations(R, t)
        B = tangent_basis(t)
        T = np.zeros(R.shape[:-2] + (6, 5))
        T[..., :3, :3] = np.eye(3)
        T[..., 3:, 3:] = B
        Tt = np.swapaxes(T, -1, -2)
        step = -np.linalg.solve(Tt @ G6 @ T, (Tt @ g6[..., None]))[..., 0]
        R = so3_exp(step[..., :3]) @ R
        t = sphere_retract(t, B, step[..., 3:])
    return R, t


def _perturbed_solutions(prob: PnecProblem, R, t, R_gt, frame: int, rel_step: float):
    """e_rot after re-solving with each symmetric covariance entry of each point moved by +-h."""
    n = prob.n_points
    pairs = [(i, j) for i in range(3) for j in range(i, 3)]
    covs = (prob.cov, prob.covp)
    base = covs[frame]
    h = rel_step * np.trace(base, axis1=-2, axis2=-1) / 3.0  # per point
    batch_cov, batch_covp, steps = [], [], []
    for p in range(n):
        for i, j in pairs:
            D = np.zeros((3, 3))
            D[i, j] += 0.5
            D[j, i] += 0.5
            for sgn in (1.0, -1.0):
                c = base.copy()
                c[p] = c[p] + sgn * h[p] * D
                batch_cov.append(c if frame == 0 else prob.cov)
                batch_covp.append(prob.covp if frame == 0 else c)
            steps.append(h[p])
    m = len(batch_cov)
    P = PnecProblem(np.broadcast_to(prob.f, (m,) + prob.f.shape), np.broadcast_to(prob.fp, (m,) + prob.fp.shape),
                    np.stack(batch_cov), np.stack(batch_covp))
    Rs, _ = gauss_newton_polish(SymmetricPnecModel(P), np.broadcast_to(R, (m, 3, 3)), np.broadcast_to(t, (m, 3)))
    L = e_rot(Rs, R_gt).reshape(n, len(pairs), 2)
    fd = (L[..., 0] - L[..., 1]) / (2.0 * np.array(steps).reshape(n, len(pairs)))
    out = np.zeros((n, 3, 3))
    for k, (i, j) in enumerate(pairs):
        out[:, i, j] = out[:, j, i] = fd[:, k]
    return out


def check_implicit_gradient(n_problems: int = 20, n_points: int = 20, seed: int = 0, rel_step: float = 1e-3,
                            report: CheckReport | None = None, details: list | None = None) -> CheckReport:
    """Implicit gradient against perturb-and-re-solve, plus the covariance-scaling pairing."""
    report = report or CheckReport()
    for k in range(n_problems):
        prob, R, t, R_gt = implicit_oracle_problem(seed * 1000 + k, n_points)
        ig = implicit_covariance_gradient(prob, R, t, R_gt)
        o1 = _perturbed_solutions(prob, R, t, R_gt, 0, rel_step)
        o2 = _perturbed_solutions(prob, R, t, R_gt, 1, rel_step)
        e1, e2 = _rel(ig.dL_dcov, o1), _rel(ig.dL_dcovp, o2)
        pairing = float(np.sum(ig.dL_dcov * prob.cov) + np.sum(ig.dL_dcovp * prob.covp))
        report.update("implicit_dL_dSigma", e1)
        report.update("implicit_dL_dSigmaP", e2)
        report.update("scaling_pairing", abs(pairing))
        if details is not None:
            details.append({"problem": k, "rel_err_cov": e1, "rel_err_covp": e2, "pairing": pairing,
                            "loss": float(ig.loss)})
    return report


def run_gradcheck(seed: int = 0, n_configs: int = 100, n_problems: int = 20, n_points: int = 20) -> CheckReport:
    report = CheckReport()
    check_residual_jacobians(n_configs, seed, report=report)
    check_grad_erot(n_configs, seed, report=report)
    check_chain_to_params(n_configs, seed, report=report)
    check_implicit_gradient(n_problems, n_points, seed, report=report)
    return report


def gradient_eigen_angles(scene: SceneConfig, n_samples: int = 1000, seed: int = 0,
                          cov2d=None) -> np.ndarray:
    """Principal eigenvector angle in [0, pi) of each point's image-plane ``dL/dcov'``, shape (n_samples, N).

    Problems are solved from a 1-degree perturbation of the true pose with
    ``cov2d`` (default identity) on every point of both frames.
    """
    cov2d = np.eye(2) if cov2d is None else cov2d
    batch = sample_batch(scene, n_samples, seed)
    cov = np.broadcast_to(cov2d, batch.cov2.shape)
    prob = batch_bearing_problem(batch, cov, cov)
    R0, t0 = perturb_pose(batch.R, batch.t, np.deg2rad(1.0), make_rng(seed, "entropy-init"))
    res = lm_minimize(SymmetricPnecModel(prob), R0, t0, on_failure="mark")
    ig = implicit_covariance_gradient(prob, res.R, res.t, batch.R)
    G = pullback_with_jacobian(unproject_jacobian(batch.obs2, batch.camera), ig.dL_dcovp)
    w, V = np.linalg.eigh(G)
    k = np.argmax(np.abs(w), axis=-1)
    v = np.take_along_axis(V, k[..., None, None], axis=-1)[..., 0]
    ang = np.mod(np.arctan2(v[..., 1], v[..., 0]), np.pi)
    keep = ig.valid & ~res.failed
    return ang[keep]


def circular_entropy(angles, bins: int = 36) -> float:
    """Shannon entropy (nats) of a histogram of axial angles on [0, pi)."""
    hist, _ = np.histogram(np.mod(angles, np.pi), bins=bins, range=(0.0, np.pi))
    p = hist[hist > 0] / hist.sum()
    return float(-np.sum(p * np.log(p)))


def eigen_angle_entropies(n_samples: int = 1000, n_points: int = 20, seed: int = 0, bins: int = 36) -> dict:
    """Mean per-point histogram entropy of gradient eigenvector angles, fixed vs random relative pose."""
    out = {}
    for mode in ("fixed", "random"):
        ang = gradient_eigen_angles(SceneConfig(n_points=n_points, pose_mode=mode, seed=seed), n_samples, seed)
        out[mode] = float(np.mean([circular_entropy(ang[:, i], bins) for i in range(ang.shape[1])]))
    return out
