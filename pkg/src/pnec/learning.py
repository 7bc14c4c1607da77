"""Learning per-point image covariances from rotation error with ADAM.

The pose is re-estimated with the symmetric PNEC energy in every forward
pass, the rotation loss is differentiated through the argmin with the
implicit gradient, pulled back to the 2D covariances and chained to their
``(s, alpha, beta)`` parameters.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import FORMAT_VERSION, content_hash, to_dict
from .energy import PnecProblem, variance_sym
from .geometry import (
    Camera,
    propagate_with_jacobian,
    pullback_with_jacobian,
    rotation_angle,
    so3_log,
    unproject,
    unproject_jacobian,
)
from .gradients import (
    CovarianceParams,
    NecLsModel,
    SymmetricPnecModel,
    chain_to_params,
    cov2d_to_params,
    implicit_covariance_gradient,
)
from .metrics import e_rot, sigma_norm_error
from .parallel import pmap, unit_slices
from .rng import ALGORITHM, make_rng
from .solver import lm_minimize, perturb_pose
from .synthgen import SceneConfig, generate_problem, sample_batch

log = logging.getLogger(__name__)

WORK_UNIT = 1024  # problems per solver call


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg, record):
        super().__init__(msg)
        self.record = record


# ---------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    rejected: int = 0


def adam_step(state: AdamState, params, grads):
    """Bias-corrected ADAM update; returns ``(new_params, new_state)``.

    A non-finite gradient leaves parameters and moments untouched and bumps
    ``state.rejected``.
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}")
    m = np.zeros_like(params) if state.m is None else state.m
    v = np.zeros_like(params) if state.v is None else state.v
    if not np.all(np.isfinite(grads)):
        log.warning("rejected ADAM step %d: non-finite gradient", state.step + 1)
        return params, AdamState(state.lr, state.beta1, state.beta2, state.eps, state.step, m, v,
                                 state.rejected + 1)
    k = state.step + 1
    m = state.beta1 * m + (1.0 - state.beta1) * grads
    v = state.beta2 * v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**k)
    v_hat = v / (1.0 - state.beta2**k)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(state.lr, state.beta1, state.beta2, state.eps, k, m, v, state.rejected)


# ---------------------------------------------------------------------------
# losses


def supervised_loss(R_est, R_gt):
    return e_rot(R_est, R_gt)


@dataclass(frozen=True)
class TripletLossConfig:
    lambda_anchor: float = 1.0

    def __post_init__(self):
        if self.lambda_anchor < 0:
            raise ValueError("lambda_anchor must be non-negative")


def cycle_loss(R12, R23, R31):
    """Angle of the composed rotation around the triplet."""
    return rotation_angle(np.asarray(R12) @ np.asarray(R23) @ np.asarray(R31))


def anchor_loss(estimates, anchors):
    return sum(e_rot(R, A) for R, A in zip(estimates, anchors))


def self_supervised_loss(poses, nec_anchors, cfg: TripletLossConfig | None = None):
    """``cycle(R12, R23, R31) + lambda * sum angle(R_ij, R_ij_anchor)``."""
    cfg = cfg or TripletLossConfig()
    R12, R23, R31 = poses
    return cycle_loss(R12, R23, R31) + cfg.lambda_anchor * anchor_loss(poses, nec_anchors)


def _unit_axis(omega):
    th = np.linalg.norm(omega, axis=-1)
    ok = (th > 1e-9) & (th < np.pi - 1e-9)
    return np.where(ok[..., None], omega / np.where(ok, th, 1.0)[..., None], 0.0), ok


def self_supervised_rotation_grads(poses, anchors, cfg: TripletLossConfig | None = None):
    """Left-perturbation gradients of the self-supervised loss for each of the three rotations."""
    cfg = cfg or TripletLossConfig()
    R12, R23, R31 = (np.asarray(R, float) for R in poses)
    axis, _ = _unit_axis(so3_log(R12 @ R23 @ R31))
    T = lambda M: np.swapaxes(M, -1, -2)
    mv = lambda M, v: np.einsum("...ij,...j->...i", M, v)
    grads = [axis, mv(T(R12), axis), mv(T(R12 @ R23), axis)]
    for k, (R, A) in enumerate(zip((R12, R23, R31), anchors)):
        a, _ = _unit_axis(so3_log(R @ T(np.asarray(A, float))))
        grads[k] = grads[k] + cfg.lambda_anchor * a
    return grads


# ---------------------------------------------------------------------------
# experiment configs and records


@dataclass
class LearningConfig:
    """Covariance learning on synthetic problems.

    ``learn_frame1=False`` supplies the ground-truth frame-1 covariances and
    learns frame 2 only. ``init_scale`` is the per-axis variance (px^2) of
    the scaled-identity initialization; ``init_from_truth`` starts from the
    generator's covariances instead.
    """

    scene: SceneConfig = field(default_factory=SceneConfig)
    n_problems: int = 12_800
    batch_size: int = 12_800
    epochs: int = 50
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    init_scale: float = 1.0
    init_from_truth: bool = False
    learn_frame1: bool = True
    perturbation_deg: float = 1.0
    lm_max_iterations: int = 100
    lm_initial_damping: float = 1e7
    regularization: float = 1e-13
    rotation_only: bool = False
    divergence_factor: float = 10.0
    evaluate_baselines: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.scene, dict):
            from .config import from_dict

            self.scene = from_dict(SceneConfig, self.scene)
        if self.n_problems < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("n_problems, batch_size must be >= 1 and epochs >= 0")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


def overfit_config(**kw) -> LearningConfig:
    """Fixed geometry, both frames learned."""
    kw.setdefault("scene", SceneConfig(pose_mode="fixed"))
    kw.setdefault("learn_frame1", True)
    return LearningConfig(**kw)


def diverse_config(**kw) -> LearningConfig:
    """Random relative poses, small isotropic frame-1 noise supplied, frame 2 learned."""
    kw.setdefault("scene", SceneConfig(pose_mode="random", frame1_isotropic_scale=0.5))
    kw.setdefault("learn_frame1", False)
    # two steps per epoch; one full-batch step per epoch stalls near 26% recovery error after 50 epochs
    kw.setdefault("batch_size", 6_400)
    return LearningConfig(**kw)


@dataclass
class EpochStats:
    epoch: int
    mean_e_rot: float
    mean_sigma_norm_err: float
    mean_cov_err: float
    n_valid: int


@dataclass
class LearningRecord:
    config: LearningConfig
    epochs: list = field(default_factory=list)
    baselines: dict = field(default_factory=dict)
    params1: CovarianceParams | None = None
    params2: CovarianceParams | None = None
    aborted: bool = False
    rejected_steps: int = 0
    initial_cov2: np.ndarray | None = None
    true_cov2: np.ndarray | None = None

    @property
    def initial(self) -> EpochStats:
        return self.epochs[0]

    @property
    def final(self) -> EpochStats:
        return self.epochs[-1]

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_e_rot", "mean_sigma_norm_err", "mean_cov_err"])
        for s in self.epochs:
            w.writerow([s.epoch, repr(s.mean_e_rot), repr(s.mean_sigma_norm_err), repr(s.mean_cov_err)])
        return buf.getvalue()

    def recovery_csv(self) -> str:
        """Per-point trace-normalized Frobenius error of the frame-2 covariances, initial and final."""
        final = self.params2.covariance()
        e0 = trace_normalized_error(self.initial_cov2, self.true_cov2)
        e1 = trace_normalized_error(final, self.true_cov2)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["point", "initial_error", "final_error"])
        for i, (a, b) in enumerate(zip(e0, e1)):
            w.writerow([i, repr(float(a)), repr(float(b))])
        return buf.getvalue()

    def manifest(self) -> dict:
        cfg = to_dict(self.config)
        return {
            "format_version": FORMAT_VERSION,
            "package_version": __version__,
            "rng": ALGORITHM,
            "config": cfg,
            "seed": self.config.seed,
            "input_hash": content_hash({"config": cfg, "rng": ALGORITHM}),
            "baselines": self.baselines,
            "aborted": self.aborted,
            "rejected_steps": self.rejected_steps,
            "final": to_dict(self.final) if self.epochs else None,
        }

    def covariance_dump(self) -> dict:
        out = {}
        for name, p in (("frame1", self.params1), ("frame2", self.params2)):
            if p is not None:
                out[name] = {"s": p.s.tolist(), "alpha": p.alpha.tolist(), "beta": p.beta.tolist()}
        return out


# ---------------------------------------------------------------------------
# training


def trace_normalized_error(learned, true) -> np.ndarray:
    """Per-point relative Frobenius error after dividing each set by its mean trace."""
    learned = np.asarray(learned, float)
    true = np.asarray(true, float)
    ln = learned / np.mean(np.trace(learned, axis1=-2, axis2=-1))
    tn = true / np.mean(np.trace(true, axis1=-2, axis2=-1))
    return np.linalg.norm(ln - tn, axis=(-2, -1)) / np.linalg.norm(tn, axis=(-2, -1))


class _Views:
    """Bearings and unprojection Jacobians of one pixel set, computed once."""

    def __init__(self, p1, p2, cam: Camera):
        self.f1, self.f2 = unproject(p1, cam), unproject(p2, cam)
        self.J1, self.J2 = unproject_jacobian(p1, cam), unproject_jacobian(p2, cam)

    def problem(self, cov1, cov2, sl=slice(None)) -> PnecProblem:
        return PnecProblem(self.f1[sl], self.f2[sl], propagate_with_jacobian(self.J1[sl], cov1),
                           propagate_with_jacobian(self.J2[sl], cov2))


class _Trainer:
    def __init__(self, cfg: LearningConfig):
        self.cfg = cfg
        scene = cfg.scene
        base = generate_problem(scene) if scene.pose_mode == "fixed" else scene
        self.batch = sample_batch(base, cfg.n_problems, cfg.seed)
        n = scene.n_points
        self.fixed_geometry = scene.pose_mode == "fixed"
        self.true1 = self.batch.cov1[0]
        self.true2 = self.batch.cov2[0]
        rng = make_rng(cfg.seed, "init-pose")
        self.R0, self.t0 = perturb_pose(self.batch.R, self.batch.t, np.deg2rad(cfg.perturbation_deg), rng)
        if cfg.init_from_truth:
            self.params1 = _params_from_cov(self.true1)
            self.params2 = _params_from_cov(self.true2)
        else:
            self.params1 = CovarianceParams.isotropic(n, cfg.init_scale)
            self.params2 = CovarianceParams.isotropic(n, cfg.init_scale)
        if not cfg.learn_frame1:
            self.params1 = None
        cam = self.batch.camera
        self.observed = _Views(self.batch.obs1, self.batch.obs2, cam)
        # noise-free views for the variance statistics; one suffices when the geometry is shared
        k = slice(0, 1) if self.fixed_geometry else slice(None)
        self.clean = _Views(self.batch.p1[k], self.batch.p2[k], cam)
        self.clean_pose = (self.batch.R[k], self.batch.t[k])
        self.true_var = self._clean_variances(self.true1, self.true2)

    def _clean_variances(self, cov1, cov2):
        p = self.clean.problem(cov1, cov2)
        return variance_sym(*self.clean_pose, p.f, p.fp, p.cov, p.covp)

    def covs(self):
        c1 = self.true1 if self.params1 is None else self.params1.covariance()
        return c1, self.params2.covariance()

    def batches(self):
        """Minibatches, one ADAM step each, in fixed order."""
        return unit_slices(self.cfg.n_problems, self.cfg.batch_size)

    def units(self, sl: slice):
        """Fixed work units inside ``sl``; independent of the thread count."""
        return [slice(sl.start + u.start, sl.start + u.stop) for u in unit_slices(sl.stop - sl.start, WORK_UNIT)]

    def solve(self, model, sl):
        cfg = self.cfg
        return lm_minimize(model, self.R0[sl], self.t0[sl], cfg.lm_max_iterations, cfg.lm_initial_damping,
                           on_failure="mark")

    def _unit_forward(self, sl, covs, with_grad, weight):
        cfg = self.cfg
        prob = self.observed.problem(*covs, sl)
        res = self.solve(SymmetricPnecModel(prob, cfg.regularization), sl)
        errs = e_rot(res.R, self.batch.R[sl])
        if not with_grad:
            return errs, None
        ig = implicit_covariance_gradient(prob, res.R, res.t, self.batch.R[sl], cfg.regularization,
                                          rotation_only=cfg.rotation_only)
        ok = ig.valid & ~res.failed
        w = ok[:, None, None, None] * weight
        g1 = np.sum(pullback_with_jacobian(self.observed.J1[sl], w * ig.dL_dcov), axis=0)
        g2 = np.sum(pullback_with_jacobian(self.observed.J2[sl], w * ig.dL_dcovp), axis=0)
        return errs, (g1, g2, int(ok.sum()))

    def forward(self, sl: slice, with_grad: bool):
        """Solve problems ``sl``; returns their e_rot and (optionally) the gradient of their mean loss."""
        covs = self.covs()
        weight = 1.0 / (sl.stop - sl.start)
        out = pmap(lambda u: self._unit_forward(u, covs, with_grad, weight), self.units(sl))
        errs = np.concatenate([o[0] for o in out])
        if not with_grad:
            return errs, None
        g1 = np.zeros((self.cfg.scene.n_points, 2, 2))
        g2 = np.zeros_like(g1)
        n_valid = 0
        for _, (a, b, k) in out:  # reduce in unit order
            g1 += a
            g2 += b
            n_valid += k
        return errs, (g1, g2, n_valid)

    def stats(self, epoch, errs, n_valid):
        c1, c2 = self.covs()
        sne = float(np.mean(sigma_norm_error(self._clean_variances(c1, c2), self.true_var)))
        cov_err = float(np.mean(trace_normalized_error(c2, self.true2)))
        return EpochStats(epoch, float(np.mean(errs)), sne, cov_err, n_valid)

    def baselines(self):
        cfg = self.cfg
        unit = np.eye(2)
        out = {k: np.empty(cfg.n_problems) for k in ("unit", "nec", "gt")}
        for sl in self.units(slice(0, cfg.n_problems)):
            pu = self.observed.problem(unit if cfg.learn_frame1 else self.true1, unit, sl)
            pg = self.observed.problem(self.true1, self.true2, sl)
            out["unit"][sl] = e_rot(self.solve(SymmetricPnecModel(pu, cfg.regularization), sl).R, self.batch.R[sl])
            out["nec"][sl] = e_rot(self.solve(NecLsModel(pu), sl).R, self.batch.R[sl])
            out["gt"][sl] = e_rot(self.solve(SymmetricPnecModel(pg, cfg.regularization), sl).R, self.batch.R[sl])
        return {
            "unit_covariance_e_rot": float(np.mean(out["unit"])),
            "nec_ls_e_rot": float(np.mean(out["nec"])),
            "true_covariance_e_rot": float(np.mean(out["gt"])),
        }

    def step(self, adam: AdamState, grads):
        g1, g2, _ = grads
        if self.params1 is None:
            new, adam = adam_step(adam, self.params2.as_array(), chain_to_params(g2, self.params2))
            self.params2 = CovarianceParams.from_array(new)
        else:
            flat = np.concatenate([self.params1.as_array(), self.params2.as_array()])
            gp = np.concatenate([chain_to_params(g1, self.params1), chain_to_params(g2, self.params2)])
            new, adam = adam_step(adam, flat, gp)
            n = self.params1.s_raw.shape[0]
            self.params1 = CovarianceParams.from_array(new[:n])
            self.params2 = CovarianceParams.from_array(new[n:])
        for p in (self.params1, self.params2):
            if p is not None:
                assert np.all(p.s > 0) and np.all((p.beta > 0) & (p.beta < 1))
        return adam


def _params_from_cov(cov):
    s, alpha, beta = cov2d_to_params(cov)
    return CovarianceParams.from_values(s, alpha, np.clip(beta, 1e-6, 1 - 1e-6))


def train_covariances(cfg: LearningConfig) -> LearningRecord:
    """Run the learning loop; row ``k`` of the curve uses the parameters after ``k`` epochs."""
    tr = _Trainer(cfg)
    rec = LearningRecord(cfg, initial_cov2=tr.covs()[1], true_cov2=tr.true2)
    if cfg.evaluate_baselines:
        rec.baselines = tr.baselines()
        log.info("baselines %s", rec.baselines)
    adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    everything = slice(0, cfg.n_problems)
    batches = tr.batches()
    # with a single batch the gradient pass also evaluates the current parameters
    fused = len(batches) == 1 and cfg.lr > 0
    for epoch in range(cfg.epochs + 1):
        last = epoch == cfg.epochs
        errs, grads = tr.forward(everything, with_grad=fused and not last)
        n_valid = grads[2] if grads else 0
        stats = tr.stats(epoch, errs, n_valid)
        rec.epochs.append(stats)
        log.info("epoch %d e_rot %.6g sigma_norm %.4g cov_err %.4g", epoch, stats.mean_e_rot,
                 stats.mean_sigma_norm_err, stats.mean_cov_err)
        if stats.mean_e_rot > cfg.divergence_factor * rec.epochs[0].mean_e_rot or not np.isfinite(stats.mean_e_rot):
            rec.aborted = True
            rec.params1, rec.params2, rec.rejected_steps = tr.params1, tr.params2, adam.rejected
            raise TrainingDivergedError(f"epoch {epoch}: mean e_rot {stats.mean_e_rot:.3g} diverged", rec)
        if last or cfg.lr == 0:
            continue
        if fused:
            adam = tr.step(adam, grads)
        else:
            for sl in batches:
                adam = tr.step(adam, tr.forward(sl, with_grad=True)[1])
    rec.params1, rec.params2, rec.rejected_steps = tr.params1, tr.params2, adam.rejected
    return rec


def train_overfit_fixed_geometry(cfg: LearningConfig | None = None) -> LearningRecord:
    return train_covariances(cfg or overfit_config())


def train_diverse_geometry(cfg: LearningConfig | None = None) -> LearningRecord:
    return train_covariances(cfg or diverse_config())
