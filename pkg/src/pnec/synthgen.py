"""Synthetic two-view problems with per-point anisotropic image noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import Correspondences, PnecProblem, RelativePose
from .geometry import Camera, normalize, project, so3_exp
from .gradients import cov2d_from_params
from .rng import make_rng

MAX_ATTEMPTS = 100_000


class GenerationError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    """Scene, motion and noise description.

    ``pose_mode="fixed"`` draws one relative pose from the seed and
    rejection-samples points visible in both frames; ``"random"`` keeps
    frame-1 pixels (inside ``margin``) and noise fixed and lets
    :func:`sample_batch` draw a new pose and new depths per problem. Noise scales are covariance
    traces in px^2, drawn log-uniformly; ``beta`` is the eigenvalue split.
    """

    n_points: int = 100
    depth_range: tuple = (5.0, 20.0)
    pose_mode: str = "fixed"
    max_rotation_deg: float = 3.0
    baseline: float = 1.0
    translation_direction: str = "forward"  # or "uniform"
    forward_jitter: float = 0.2
    noise_scale_range: tuple = (0.25, 4.0)
    noise_beta_range: tuple = (0.05, 0.95)
    frame1_isotropic_scale: float | None = None  # trace of a shared isotropic frame-1 covariance
    outlier_fraction: float = 0.0
    focal: float = 720.0
    image_size: tuple = (1240, 370)
    margin: float = 0.15  # border kept clear of fixed frame-1 pixels in random-pose mode
    seed: int = 0

    def __post_init__(self):
        self.depth_range = tuple(float(v) for v in self.depth_range)
        self.noise_scale_range = tuple(float(v) for v in self.noise_scale_range)
        self.noise_beta_range = tuple(float(v) for v in self.noise_beta_range)
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.pose_mode not in ("fixed", "random"):
            raise ValueError(f"unknown pose_mode {self.pose_mode!r}")
        if self.translation_direction not in ("forward", "uniform"):
            raise ValueError(f"unknown translation_direction {self.translation_direction!r}")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must be in [0, 1)")
        lo, hi = self.noise_beta_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("noise_beta_range must lie in (0, 1)")
        if self.noise_scale_range[0] < 0 or self.noise_scale_range[0] > self.noise_scale_range[1]:
            raise ValueError("invalid noise_scale_range")
        if self.n_points < 1 or self.focal <= 0:
            raise ValueError("n_points and focal must be positive")

    @property
    def camera(self) -> Camera:
        w, h = self.image_size
        return Camera(self.focal, self.focal, w / 2.0, h / 2.0)


@dataclass
class SyntheticProblem:
    R: np.ndarray
    t: np.ndarray  # unit direction
    baseline: float
    points: np.ndarray  # (N, 3) in frame 1
    p1: np.ndarray  # noise-free pixels
    p2: np.ndarray
    cov1: np.ndarray  # ground-truth image covariances (N, 2, 2)
    cov2: np.ndarray
    obs1: np.ndarray  # noisy observations
    obs2: np.ndarray
    outlier: np.ndarray
    camera: Camera = field(compare=False)

    @property
    def pose(self) -> RelativePose:
        return RelativePose(self.R, self.t)

    @property
    def n_points(self) -> int:
        return self.p1.shape[0]

    def correspondences(self, noisy: bool = True, cov1=None, cov2=None) -> Correspondences:
        a, b = (self.obs1, self.obs2) if noisy else (self.p1, self.p2)
        return Correspondences(a, b, self.cov1 if cov1 is None else cov1, self.cov2 if cov2 is None else cov2)

    def bearing_problem(self, noisy: bool = True, cov1=None, cov2=None) -> PnecProblem:
        return PnecProblem.from_correspondences(self.correspondences(noisy, cov1, cov2), self.camera)


def _sample_covs(rng, n, cfg: SceneConfig):
    lo, hi = cfg.noise_scale_range
    if lo > 0:
        s = np.exp(rng.uniform(np.log(lo), np.log(hi), n))
    else:
        s = rng.uniform(lo, hi, n)
    alpha = rng.uniform(0.0, np.pi, n)
    beta = rng.uniform(*cfg.noise_beta_range, n)
    return cov2d_from_params(s, alpha, beta)


def _sample_pose(rng, cfg: SceneConfig):
    axis = normalize(rng.normal(size=3))
    angle = rng.uniform(0.0, np.deg2rad(cfg.max_rotation_deg))
    R = so3_exp(axis * angle)
    if cfg.translation_direction == "forward":
        t = normalize(np.array([*rng.normal(0.0, cfg.forward_jitter, 2), 1.0]))
    else:
        t = normalize(rng.normal(size=3))
    return R, t


def _inside(pix, cfg: SceneConfig, margin=0.0):
    w, h = cfg.image_size
    mx, my = margin * w, margin * h
    return (pix[..., 0] >= mx) & (pix[..., 0] <= w - mx) & (pix[..., 1] >= my) & (pix[..., 1] <= h - my)


def _draw_noise(rng, cov):
    L = _sqrt_psd(cov)
    z = rng.standard_normal(cov.shape[:-1])
    return np.einsum("...ij,...j->...i", L, z)


def _sqrt_psd(cov):
    w, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def _frame1_pixels(rng, cfg: SceneConfig, n):
    w, h = cfg.image_size
    m = cfg.margin
    u = rng.uniform(m * w, (1 - m) * w, n)
    v = rng.uniform(m * h, (1 - m) * h, n)
    return np.stack([u, v], -1)


def _place_points(rng, cfg: SceneConfig, pix1, R, t, tries=64):
    """Depths for fixed frame-1 pixels so every point is visible in frame 2, or None."""
    cam = cfg.camera
    n = pix1.shape[0]
    rays = np.stack([(pix1[:, 0] - cam.cx) / cam.fx, (pix1[:, 1] - cam.cy) / cam.fy, np.ones(n)], -1)
    depth = rng.uniform(*cfg.depth_range, size=(tries, n))
    X1 = rays[None] * depth[..., None]
    X2 = (X1 - cfg.baseline * t) @ R  # R^T (X1 - b t)
    ok = (X2[..., 2] > 1e-6) & _inside(project(X2, cam), cfg)
    if not np.all(ok.any(axis=0)):
        return None
    first = np.argmax(ok, axis=0)
    return X1[first, np.arange(n)]


def _assemble(cfg, R, t, X1, cov1, cov2, noise_rng):
    cam = cfg.camera
    X2 = (X1 - cfg.baseline * t) @ R
    p1 = project(X1, cam)
    p2 = project(X2, cam)
    obs1 = p1 + _draw_noise(noise_rng, cov1)
    obs2 = p2 + _draw_noise(noise_rng, cov2)
    n = p1.shape[0]
    return SyntheticProblem(R, t, cfg.baseline, X1, p1, p2, cov1, cov2, obs1, obs2, np.zeros(n, bool), cam)


def _frame1_covs(cfg, rng, n):
    if cfg.frame1_isotropic_scale is not None:
        return np.broadcast_to(0.5 * cfg.frame1_isotropic_scale * np.eye(2), (n, 2, 2)).copy()
    return _sample_covs(rng, n, cfg)


def _visible_points(rng, cfg: SceneConfig, R, t):
    """Rejection-sample frame-1 points visible in both images."""
    n = cfg.n_points
    cam = cfg.camera
    kept = []
    count = 0
    for _ in range(MAX_ATTEMPTS):
        pix = _frame1_pixels(rng, cfg, 4 * n)
        depth = rng.uniform(*cfg.depth_range, 4 * n)
        X1 = np.stack([(pix[:, 0] - cam.cx) / cam.fx, (pix[:, 1] - cam.cy) / cam.fy, np.ones(4 * n)], -1)
        X1 = X1 * depth[:, None]
        X2 = (X1 - cfg.baseline * t) @ R
        ok = (X2[:, 2] > 1e-6) & _inside(project(X2, cam), cfg)
        kept.append(X1[ok])
        count += int(ok.sum())
        if count >= n:
            return np.concatenate(kept)[:n]
    raise GenerationError(f"no visible configuration after {MAX_ATTEMPTS} attempts")


def generate_problem(cfg: SceneConfig) -> SyntheticProblem:
    """One problem, deterministic in ``cfg.seed``."""
    geo = make_rng(cfg.seed, "geometry")
    n = cfg.n_points
    cov1 = _frame1_covs(cfg, geo, n)
    cov2 = _sample_covs(geo, n, cfg)
    R, t = _sample_pose(geo, cfg)
    X1 = _visible_points(geo, cfg, R, t)
    prob = _assemble(cfg, R, t, X1, cov1, cov2, make_rng(cfg.seed, "noise"))
    if cfg.outlier_fraction > 0:
        prob = inject_outliers(prob, cfg.outlier_fraction, cfg.seed, image_size=cfg.image_size)
    return prob


def resample_noise(base: SyntheticProblem, rng: np.random.Generator) -> SyntheticProblem:
    obs1 = base.p1 + _draw_noise(rng, base.cov1)
    obs2 = base.p2 + _draw_noise(rng, base.cov2)
    return SyntheticProblem(base.R, base.t, base.baseline, base.points, base.p1, base.p2, base.cov1,
                            base.cov2, obs1, obs2, np.zeros(base.n_points, bool), base.camera)


@dataclass
class ProblemBatch:
    """Stacked problems: every per-point array gets a leading batch axis."""

    R: np.ndarray  # (B, 3, 3)
    t: np.ndarray  # (B, 3)
    p1: np.ndarray  # (B, N, 2)
    p2: np.ndarray
    cov1: np.ndarray  # (B, N, 2, 2)
    cov2: np.ndarray
    obs1: np.ndarray
    obs2: np.ndarray
    camera: Camera = field(compare=False)
    baseline: float = 1.0

    def __len__(self):
        return self.R.shape[0]

    def __getitem__(self, i) -> SyntheticProblem:
        X1 = np.full(self.p1.shape[1:-1] + (3,), np.nan)
        n = self.p1.shape[1]
        return SyntheticProblem(self.R[i], self.t[i], self.baseline, X1, self.p1[i], self.p2[i], self.cov1[i],
                                self.cov2[i], self.obs1[i], self.obs2[i], np.zeros(n, bool), self.camera)

    @classmethod
    def stack(cls, problems: list[SyntheticProblem], camera: Camera, baseline: float = 1.0) -> ProblemBatch:
        if not problems:
            z = np.zeros((0, 0, 2))
            return cls(np.zeros((0, 3, 3)), np.zeros((0, 3)), z, z, np.zeros((0, 0, 2, 2)),
                       np.zeros((0, 0, 2, 2)), z, z, camera, baseline)
        g = lambda name: np.stack([getattr(p, name) for p in problems])
        return cls(g("R"), g("t"), g("p1"), g("p2"), g("cov1"), g("cov2"), g("obs1"), g("obs2"),
                   camera, baseline)


def sample_batch(base, n: int, seed: int) -> ProblemBatch:
    """``n`` problems; problem ``i`` depends only on ``(base, seed, i)``.

    A :class:`SyntheticProblem` base (or a fixed-pose config) keeps the
    noise-free geometry and resamples observation noise. A random-pose
    config keeps frame-1 pixels and all covariances and draws pose, depths
    and noise per problem.
    """
    if isinstance(base, SceneConfig) and base.pose_mode == "fixed":
        base = generate_problem(base)
    if isinstance(base, SyntheticProblem):
        probs = [resample_noise(base, make_rng(seed, "batch", i)) for i in range(n)]
        return ProblemBatch.stack(probs, base.camera, base.baseline)

    cfg: SceneConfig = base
    geo = make_rng(cfg.seed, "geometry")
    pix1 = _frame1_pixels(geo, cfg, cfg.n_points)
    cov1 = _frame1_covs(cfg, geo, cfg.n_points)
    cov2 = _sample_covs(geo, cfg.n_points, cfg)
    probs = []
    for i in range(n):
        rng = make_rng(seed, "batch", i)
        for _ in range(MAX_ATTEMPTS):
            R, t = _sample_pose(rng, cfg)
            X1 = _place_points(rng, cfg, pix1, R, t)
            if X1 is not None:
                break
        else:
            raise GenerationError(f"no visible configuration after {MAX_ATTEMPTS} attempts")
        probs.append(_assemble(cfg, R, t, X1, cov1, cov2, rng))
    return ProblemBatch.stack(probs, cfg.camera, cfg.baseline)


def inject_outliers(problem: SyntheticProblem, fraction: float, seed: int, image_size=None) -> SyntheticProblem:
    """Replace ``round(fraction * N)`` second-frame observations by uniform pixels."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    n = problem.n_points
    k = int(np.floor(fraction * n + 0.5))
    if k == 0:
        return problem
    if image_size is None:
        image_size = (2.0 * problem.camera.cx, 2.0 * problem.camera.cy)
    rng = make_rng(seed, "outliers")
    idx = rng.choice(n, size=k, replace=False)
    obs2 = problem.obs2.copy()
    obs2[idx, 0] = rng.uniform(0.0, image_size[0], k)
    obs2[idx, 1] = rng.uniform(0.0, image_size[1], k)
    flags = problem.outlier.copy()
    flags[idx] = True
    return SyntheticProblem(problem.R, problem.t, problem.baseline, problem.points, problem.p1, problem.p2,
                            problem.cov1, problem.cov2, problem.obs1, obs2, flags, problem.camera)


def batch_bearing_problem(batch: ProblemBatch, cov1=None, cov2=None, noisy: bool = True) -> PnecProblem:
    """Bearing problem for a whole batch; covariances default to ground truth and broadcast."""
    a, b = (batch.obs1, batch.obs2) if noisy else (batch.p1, batch.p2)
    c1 = batch.cov1 if cov1 is None else np.broadcast_to(cov1, batch.cov1.shape)
    c2 = batch.cov2 if cov2 is None else np.broadcast_to(cov2, batch.cov2.shape)
    return PnecProblem.from_correspondences(Correspondences(a, b, c1, c2), batch.camera)
