"""Relative pose estimation: 8-point hypotheses in RANSAC, then NEC-LS, then symmetric PNEC."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .energy import EnergyConfig, PnecProblem, RelativePose
from .geometry import normalize, so3_exp, sphere_retract, tangent_basis
from .gradients import NecLsModel, ResidualModel, SymmetricPnecModel
from .rng import make_rng

log = logging.getLogger(__name__)

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


class InsufficientDataError(ValueError):
    pass


class DegenerateConfigurationError(ValueError):
    pass


class NumericalFailureError(ArithmeticError):
    """Non-finite energy or gradient; carries the last finite iterate."""

    def __init__(self, msg, R=None, t=None):
        super().__init__(msg)
        self.R = R
        self.t = t


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class SolverConfig:
    lm_max_iterations: int = 100
    lm_initial_damping: float = 1e7
    ransac_iterations: int = 5000
    ransac_threshold: float = 1e-6
    perturbation_scale: float = float(np.deg2rad(1.0))
    seed: int = 0
    regularization: float = 1e-13
    # "nec": squared NEC residual; "sampson": NEC residual over its first-order
    # angular scale, which stops outliers near the epipole from passing cheaply
    ransac_residual: str = "nec"
    # "count": most inliers wins; "msac": lowest truncated squared residual sum
    ransac_cost: str = "count"

    def __post_init__(self):
        if self.ransac_residual not in ("nec", "sampson"):
            raise ValueError(f"unknown ransac_residual {self.ransac_residual!r}")
        if self.ransac_cost not in ("count", "msac"):
            raise ValueError(f"unknown ransac_cost {self.ransac_cost!r}")
        if self.lm_max_iterations < 1 or self.ransac_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if not self.ransac_threshold > 0:
            raise ValueError("ransac_threshold must be positive")

    @property
    def energy(self) -> EnergyConfig:
        return EnergyConfig(self.regularization)


@dataclass
class SolveReport:
    pose: RelativePose
    inlier_mask: np.ndarray
    stage_energies: dict = field(default_factory=dict)
    iterations_used: dict = field(default_factory=dict)
    converged: bool = True
    stage_poses: dict = field(default_factory=dict)
    low_parallax: bool = False


# ---------------------------------------------------------------------------
# eight-point


@dataclass
class EssentialEstimate:
    E: np.ndarray
    candidates: list  # four (R, t) pairs
    singular_values: np.ndarray  # of the design matrix, length 9
    parallax_ratio: float
    low_parallax: bool


def _design(f, fp):
    return (f[..., :, :, None] * fp[..., :, None, :]).reshape(f.shape[:-1] + (9,))


def _essential_from_design(A):
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    E = Vt[..., -1, :].reshape(A.shape[:-2] + (3, 3))
    U, _, Vt2 = np.linalg.svd(E)
    E = U @ (np.array([1.0, 1.0, 0.0])[:, None] * Vt2)
    pad = np.zeros(A.shape[:-2] + (9,))
    pad[..., : s.shape[-1]] = s
    return E, pad


def decompose_essential(E):
    """Four ``(R, t)`` candidates of ``E = skew(t) R``."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def triangulate_depths(R, t, f, fp):
    """Midpoint depths ``(lam, lam')`` with ``lam f ~ lam' R fp + t``."""
    g = fp @ R.T
    fg = np.sum(f * g, axis=-1)
    ft = f @ t
    gt = g @ t
    det = 1.0 - fg**2
    det = np.where(np.abs(det) < 1e-15, 1e-15, det)
    lam = (ft - fg * gt) / det
    lamp = (fg * ft - gt) / det
    return lam, lamp


def select_by_cheirality(candidates, f, fp):
    """Candidate with the most points in front of both cameras.

    Ties go to the lower total squared NEC residual, then candidate order.
    """
    best, best_key = None, None
    for i, (R, t) in enumerate(candidates):
        lam, lamp = triangulate_depths(R, t, f, fp)
        votes = int(np.sum((lam > 0) & (lamp > 0)))
        res = float(np.sum((np.cross(f, fp @ R.T) @ t) ** 2))
        key = (-votes, res, i)
        if best_key is None or key < best_key:
            best, best_key = (R, t), key
    return best


def eight_point(f, fp, parallax_threshold: float = 1e-3) -> EssentialEstimate:
    """Linear essential matrix from >= 8 bearing pairs."""
    f = np.asarray(f, dtype=float)
    fp = np.asarray(fp, dtype=float)
    if f.shape[0] < 8:
        raise InsufficientDataError(f"eight-point needs >= 8 correspondences, got {f.shape[0]}")
    E, s = _essential_from_design(_design(f, fp))
    rank = int(np.sum(s > 1e-10 * s[0]))
    if rank < 6:
        raise DegenerateConfigurationError(f"design matrix rank {rank} < 6")
    ratio = float(s[7] / s[0])
    cands = decompose_essential(E)
    return EssentialEstimate(E, cands, s, ratio, ratio < parallax_threshold)


# ---------------------------------------------------------------------------
# RANSAC


def hypothesis_residuals(E, f, fp, kind: str = "nec") -> np.ndarray:
    """Squared residuals ``(H, N)`` of bearing pairs under essentials ``(H, 3, 3)``.

    ``"sampson"`` divides by the squared gradient of ``f^T E fp`` restricted to
    the tangent planes of both bearings.
    """
    Efp = np.einsum("hij,nj->hni", E, fp)
    num = np.einsum("ni,hni->hn", f, Efp)
    if kind == "nec":
        return num**2
    Etf = np.einsum("hji,nj->hni", E, f)
    den = (Efp**2).sum(-1) + (Etf**2).sum(-1) - 2.0 * num**2
    return num**2 / np.maximum(den, 1e-300)


def ransac(problem: PnecProblem, cfg: SolverConfig) -> SolveReport:
    """8-point hypotheses scored against the threshold.

    With the default config the residual is the squared NEC residual and the
    hypothesis with most inliers wins (ties: lower inlier residual sum, then
    sample index).
    """
    f, fp = problem.f, problem.fp
    n = f.shape[0]
    if n < 8:
        raise InsufficientDataError(f"RANSAC needs >= 8 correspondences, got {n}")
    # no subset can do better than the full set; reject data that cannot pin down E at all
    s_all = np.linalg.svd(_design(f, fp), compute_uv=False)
    rank = int(np.sum(s_all > 1e-10 * s_all[0]))
    if rank < 6:
        raise DegenerateConfigurationError(f"design matrix rank {rank} < 6 over all correspondences")
    rng = make_rng(cfg.seed, "ransac")
    iters = cfg.ransac_iterations
    samples = np.argsort(rng.random((iters, n)), axis=1)[:, :8]
    E, _ = _essential_from_design(_design(f[samples], fp[samples]))
    # with singular values (1, 1, 0), f^T E fp equals the NEC residual up to sign
    r2 = hypothesis_residuals(E, f, fp, cfg.ransac_residual)
    inl = r2 <= cfg.ransac_threshold
    counts = inl.sum(axis=1)
    resid = np.where(inl, r2, 0.0).sum(axis=1)
    if cfg.ransac_cost == "msac":
        cost = resid + (n - counts) * cfg.ransac_threshold
        order = np.lexsort((np.arange(iters), cost))
        resid = cost
    else:
        order = np.lexsort((np.arange(iters), resid, -counts))
    h = int(order[0])
    mask = inl[h]
    if mask.sum() < 8:
        mask = np.ones(n, dtype=bool) if counts[h] == 0 else mask
    R, t = select_by_cheirality(decompose_essential(E[h]), f[mask], fp[mask])
    pose = RelativePose(R, normalize(t))
    return SolveReport(
        pose=pose,
        inlier_mask=mask,
        stage_energies={"ransac": float(resid[h])},
        iterations_used={"ransac": iters},
        converged=True,
    )


# ---------------------------------------------------------------------------
# Levenberg-Marquardt on SO(3) x S^2


@dataclass
class LMResult:
    R: np.ndarray
    t: np.ndarray
    energy: np.ndarray
    initial_energy: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    failed: np.ndarray
    history: np.ndarray  # (iterations, batch) accepted energies, NaN when idle


def lm_minimize(
    model: ResidualModel,
    R0,
    t0,
    max_iterations: int = 100,
    initial_damping: float = 1e7,
    on_failure: str = "raise",
) -> LMResult:
    """Levenberg-Marquardt over rotation (left exp update) and unit translation.

    Works on a single problem or a leading batch axis; each problem keeps its
    own damping and stops on max iterations, step norm < 1e-12 or relative
    energy decrease < 1e-12. Damping is divided by 3 on accepted steps and
    multiplied by 2 on rejected ones, clamped to [1e-12, 1e32].
    """
    R0 = np.asarray(R0, dtype=float)
    t0 = np.asarray(t0, dtype=float)
    single = R0.ndim == 2
    if single:
        # indexing with None adds a leading batch axis to every array
        model = model.take(None)
        R0, t0 = R0[None], t0[None]
    nb = R0.shape[0]
    R = R0.copy()
    t = normalize(t0)
    lam = np.full(nb, float(initial_damping))
    # normal equations in ambient (rotation, translation) coordinates, reused after accepted steps
    E, G6, g6 = model.normal_equations(R, t)
    E0 = E.copy()
    iters = np.zeros(nb, dtype=int)
    converged = np.zeros(nb, dtype=bool)
    failed = ~np.isfinite(E)
    if np.any(failed) and on_failure == "raise":
        raise NumericalFailureError("non-finite initial energy", R0, t0)
    converged |= E == 0
    active = ~(converged | failed)
    history = np.full((max_iterations + 1, nb), np.nan)
    history[0] = E
    eye5 = np.eye(5)

    for it in range(max_iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Ri, ti = R[idx], t[idx]
        B = tangent_basis(ti)
        T = np.zeros((idx.size, 6, 5))
        T[:, :3, :3] = np.eye(3)
        T[:, 3:, 3:] = B
        Tt = np.swapaxes(T, -1, -2)
        A = Tt @ G6[idx] @ T
        g = (Tt @ g6[idx][..., None])[..., 0]
        bad = ~(np.all(np.isfinite(g), axis=1) & np.all(np.isfinite(A), axis=(1, 2)))
        if np.any(bad):
            if on_failure == "raise":
                raise NumericalFailureError("non-finite gradient", R[idx[bad]], t[idx[bad]])
            failed[idx[bad]] = True
        zero_grad = np.all(g == 0, axis=1) & ~bad
        iters[idx] += 1

        Am = A + lam[idx, None, None] * eye5
        Am[bad] = eye5
        gs = np.where(bad[:, None], 0.0, g)
        step = -np.linalg.solve(Am, gs[..., None])[..., 0]
        Rn = so3_exp(step[:, :3]) @ Ri
        tn = sphere_retract(ti, B, step[:, 3:])
        En, G6n, g6n = model.normal_equations(Rn, tn, idx)
        nonfinite = ~np.isfinite(En)
        accept = (En < E[idx]) & ~bad & ~nonfinite
        rel = np.where(E[idx] > 0, (E[idx] - En) / np.where(E[idx] > 0, E[idx], 1.0), 0.0)

        a = idx[accept]
        R[a] = Rn[accept]
        t[a] = tn[accept]
        E[a] = En[accept]
        G6[a] = G6n[accept]
        g6[a] = g6n[accept]
        history[it + 1, a] = En[accept]
        lam[idx] = np.where(accept, lam[idx] / 3.0, lam[idx] * 2.0)
        np.clip(lam, 1e-12, 1e32, out=lam)

        snorm = np.linalg.norm(step, axis=1)
        done = zero_grad | (snorm < 1e-12) | (accept & (rel < 1e-12)) | (accept & (En == 0))
        converged[idx[done & ~bad]] = True
        active[idx[done | bad]] = False

    out_R, out_t = R, t
    res = LMResult(out_R, out_t, E, E0, iters, converged, failed, history[: int(iters.max(initial=0)) + 1])
    if single:
        res = LMResult(R[0], t[0], E[0], E0[0], iters[0], converged[0], failed[0], res.history[:, 0])
    return res


def perturb_pose(R, t, scale: float, rng: np.random.Generator):
    """Random rotation about a uniform axis with angle uniform in [0, scale]; same for t.

    Vectorized over a leading batch axis of ``R``.
    """
    R = np.asarray(R, float)
    t = np.asarray(t, float)
    shape = R.shape[:-2]
    axes = normalize(rng.normal(size=shape + (3,)))
    ang = rng.uniform(0.0, scale, size=shape)
    Rn = so3_exp(axes * ang[..., None]) @ R
    axes_t = normalize(rng.normal(size=shape + (3,)))
    ang_t = rng.uniform(0.0, scale, size=shape)
    tn = so3_exp(axes_t * ang_t[..., None]) @ t[..., None]
    return Rn, normalize(tn[..., 0])


def constant_motion_init(previous: RelativePose | None) -> RelativePose | None:
    """Initialization for the next frame pair: reuse the last relative pose."""
    return previous


# ---------------------------------------------------------------------------
# multi-stage pipeline


def _lm_stage(name, model, pose, cfg):
    try:
        res = lm_minimize(model, pose.R, pose.t, cfg.lm_max_iterations, cfg.lm_initial_damping)
    except Exception as exc:
        raise StageError(name, exc) from exc
    return res


def estimate_pose_multistage(
    problem: PnecProblem,
    cfg: SolverConfig | None = None,
    init: RelativePose | None = None,
    weights=None,
    use_ransac: bool = True,
) -> SolveReport:
    """RANSAC, then NEC-LS on the inliers, then symmetric PNEC from the NEC-LS result.

    NEC-LS starts from whichever of ``init`` (e.g. a constant-motion guess)
    and the RANSAC pose has the lower NEC-LS energy on the inliers.
    """
    cfg = cfg or SolverConfig()
    n = problem.n_points
    if n < 8:
        raise InsufficientDataError(f"need >= 8 correspondences, got {n}")
    report = SolveReport(pose=init or RelativePose.identity(), inlier_mask=np.ones(n, dtype=bool))
    if use_ransac:
        try:
            rep = ransac(problem, cfg)
        except Exception as exc:
            raise StageError("ransac", exc) from exc
        report.inlier_mask = rep.inlier_mask
        report.stage_energies.update(rep.stage_energies)
        report.iterations_used.update(rep.iterations_used)
        report.stage_poses["ransac"] = rep.pose
        start = rep.pose
    else:
        if init is None:
            raise ValueError("init is required when RANSAC is disabled")
        start = init
    sub = problem.subset(report.inlier_mask)
    w = None if weights is None else np.asarray(weights)[report.inlier_mask]
    nec = NecLsModel(sub, w)
    if (init is not None and use_ransac
            and nec.energy(init.R[None], init.t[None])[0] < nec.energy(start.R[None], start.t[None])[0]):
        start = init

    r1 = _lm_stage("nec_ls", nec, start, cfg)
    p1 = RelativePose(r1.R, r1.t)
    report.stage_poses["nec_ls"] = p1
    report.stage_energies["nec_ls"] = float(r1.energy)
    report.iterations_used["nec_ls"] = int(r1.iterations)

    r2 = _lm_stage("pnec", SymmetricPnecModel(sub, cfg.regularization), p1, cfg)
    p2 = RelativePose(r2.R, r2.t)
    report.stage_poses["pnec"] = p2
    report.stage_energies["pnec"] = float(r2.energy)
    report.iterations_used["pnec"] = int(r2.iterations)
    report.pose = p2
    report.converged = bool(r1.converged and r2.converged)
    return report
