"""Rotation-group arithmetic, pinhole unprojection and bearing covariances.

Every function accepts arbitrary leading batch dimensions: vectors are
``(..., 3)``, matrices ``(..., 3, 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-8
# above this angle the log uses the symmetric part to recover the axis
_NEAR_PI = 0.75 * np.pi


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @classmethod
    def simple(cls, f: float, width: float = 0.0, height: float = 0.0) -> Camera:
        return cls(f, f, width / 2.0, height / 2.0)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def skew(u) -> np.ndarray:
    """Cross-product matrix: ``skew(u) @ v == cross(u, v)``."""
    u = np.asarray(u, dtype=float)
    z = np.zeros(u.shape[:-1])
    x, y, w = u[..., 0], u[..., 1], u[..., 2]
    return np.stack(
        [
            np.stack([z, -w, y], axis=-1),
            np.stack([w, z, -x], axis=-1),
            np.stack([-y, x, z], axis=-1),
        ],
        axis=-2,
    )


def vee(W) -> np.ndarray:
    """Inverse of :func:`skew` (uses the antisymmetric part)."""
    W = np.asarray(W, dtype=float)
    return 0.5 * np.stack(
        [W[..., 2, 1] - W[..., 1, 2], W[..., 0, 2] - W[..., 2, 0], W[..., 1, 0] - W[..., 0, 1]],
        axis=-1,
    )


def so3_exp(x) -> np.ndarray:
    """Rodrigues exponential of a rotation vector (radians)."""
    x = np.asarray(x, dtype=float)
    theta = np.linalg.norm(x, axis=-1)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    X = skew(x)
    eye = np.broadcast_to(np.eye(3), X.shape)
    return eye + a[..., None, None] * X + b[..., None, None] * (X @ X)


def so3_log(R) -> np.ndarray:
    """Principal logarithm, returning a rotation vector with norm in [0, pi].

    At exactly pi the axis is read from the column of (R + I)/2 with the
    largest diagonal entry, with that component made positive.
    """
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    w = vee(R)  # sin(theta) * axis
    # atan2 keeps full precision near 0 and pi, unlike arccos of the trace
    theta = np.arctan2(np.linalg.norm(w, axis=-1), cos)

    sin = np.sin(theta)
    small = theta < 1e-6
    near_pi = theta > _NEAR_PI
    generic = ~(small | near_pi)

    out = np.empty(R.shape[:-2] + (3,))
    # small angle: theta/sin(theta) ~ 1 + theta^2/6
    out[...] = w * (1.0 + theta**2 / 6.0)[..., None]
    if np.any(generic):
        scale = np.where(generic, theta / np.where(generic, sin, 1.0), 0.0)
        out = np.where(generic[..., None], w * scale[..., None], out)
    if np.any(near_pi):
        S = 0.5 * (R + np.swapaxes(R, -1, -2))
        eye = np.broadcast_to(np.eye(3), S.shape)
        denom = np.where(near_pi, 1.0 - cos, 1.0)[..., None, None]
        aat = (S - cos[..., None, None] * eye) / denom
        diag = np.diagonal(aat, axis1=-2, axis2=-1)
        k = np.argmax(diag, axis=-1)
        col = np.take_along_axis(aat, k[..., None, None].repeat(3, axis=-2), axis=-1)[..., 0]
        axis = col / np.linalg.norm(col, axis=-1, keepdims=True)
        dot = np.sum(axis * w, axis=-1)
        # sign from the antisymmetric part when it carries information
        flip = dot < 0
        axis = np.where(flip[..., None], -axis, axis)
        out = np.where(near_pi[..., None], axis * theta[..., None], out)
    return out


def so3_left_jacobian(x) -> np.ndarray:
    """Left Jacobian J with ``exp(x + d) ~ exp(J d) exp(x)``."""
    x = np.asarray(x, dtype=float)
    theta = np.linalg.norm(x, axis=-1)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    b = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (safe - np.sin(safe)) / safe**3)
    X = skew(x)
    eye = np.broadcast_to(np.eye(3), X.shape)
    return eye + a[..., None, None] * X + b[..., None, None] * (X @ X)


def rotation_angle(R) -> np.ndarray:
    """Geodesic angle of a rotation in [0, pi].

    ``atan2(|vee(R - R^T)| / 2, (tr R - 1) / 2)`` stays accurate at both ends,
    where ``arccos`` of the trace alone loses half the digits.
    """
    R = np.asarray(R, dtype=float)
    s = np.linalg.norm(vee(R), axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(s, c)


def is_rotation(R, tol: float = 1e-12) -> bool:
    R = np.asarray(R, dtype=float)
    eye = np.eye(3)
    ortho = np.linalg.norm(np.swapaxes(R, -1, -2) @ R - eye, axis=(-2, -1))
    det = np.linalg.det(R)
    return bool(np.all(ortho <= tol) and np.all(np.abs(det - 1.0) <= tol))


def project_to_so3(M) -> np.ndarray:
    """Closest rotation in Frobenius norm."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    d = np.sign(np.linalg.det(U @ Vt))
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    return U @ Vt


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def tangent_basis(t) -> np.ndarray:
    """Orthonormal basis ``(..., 3, 2)`` of the plane orthogonal to unit ``t``.

    Built from the world axis least aligned with ``t`` so the basis is a
    deterministic function of ``t``.
    """
    t = np.asarray(t, dtype=float)
    k = np.argmin(np.abs(t), axis=-1)
    e = np.eye(3)[k]
    b1 = normalize(np.cross(t, e))
    b2 = np.cross(t, b1)
    return np.stack([b1, b2], axis=-1)


def sphere_retract(t, B, delta) -> np.ndarray:
    """Move unit ``t`` by ``B @ delta`` and renormalize."""
    return normalize(t + np.einsum("...ij,...j->...i", B, delta))


def _ray(p, cam: Camera) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    x = (p[..., 0] - cam.cx) / cam.fx
    y = (p[..., 1] - cam.cy) / cam.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def unproject(p, cam: Camera) -> np.ndarray:
    """Pixel ``(..., 2)`` to unit bearing ``(..., 3)``."""
    return normalize(_ray(p, cam))


def project(f, cam: Camera) -> np.ndarray:
    """Pinhole forward map of a direction with positive depth."""
    f = np.asarray(f, dtype=float)
    u = cam.fx * f[..., 0] / f[..., 2] + cam.cx
    v = cam.fy * f[..., 1] / f[..., 2] + cam.cy
    return np.stack([u, v], axis=-1)


def unproject_jacobian(p, cam: Camera) -> np.ndarray:
    """Jacobian ``(..., 3, 2)`` of :func:`unproject` with respect to the pixel."""
    m = _ray(p, cam)
    r = np.linalg.norm(m, axis=-1)
    f = m / r[..., None]
    eye = np.broadcast_to(np.eye(3), f.shape[:-1] + (3, 3))
    P = (eye - f[..., :, None] * f[..., None, :]) / r[..., None, None]
    # d ray / d pixel only touches x, y
    return np.stack([P[..., :, 0] / cam.fx, P[..., :, 1] / cam.fy], axis=-1)


def propagate_cov(p, cov2, cam: Camera) -> np.ndarray:
    """First-order image-plane to bearing covariance, ``J cov2 J^T``.

    The Jacobian annihilates the bearing direction, so the result is
    tangent to the unit sphere (rank <= 2).
    """
    J = unproject_jacobian(p, cam)
    out = J @ np.asarray(cov2, dtype=float) @ np.swapaxes(J, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def propagate_with_jacobian(J, cov2) -> np.ndarray:
    """``J cov2 J^T`` for precomputed unprojection Jacobians ``(..., 3, 2)``."""
    J = np.asarray(J, dtype=float)
    cov2 = np.asarray(cov2, dtype=float)
    j0, j1 = J[..., :, 0], J[..., :, 1]
    cxx = cov2[..., 0, 0, None]
    cxy = 0.5 * (cov2[..., 0, 1] + cov2[..., 1, 0])[..., None]
    cyy = cov2[..., 1, 1, None]
    v0 = cxx * j0 + cxy * j1  # J cov2 column 0
    v1 = cxy * j0 + cyy * j1
    out = v0[..., :, None] * j0[..., None, :] + v1[..., :, None] * j1[..., None, :]
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def pullback_with_jacobian(J, grad3) -> np.ndarray:
    """``J^T G J`` for precomputed unprojection Jacobians."""
    J = np.asarray(J, dtype=float)
    GJ = np.asarray(grad3, dtype=float) @ J
    return np.swapaxes(J, -1, -2) @ GJ


def pullback_cov_gradient(grad3, p, cam: Camera) -> np.ndarray:
    """Adjoint of :func:`propagate_cov`: ``d/dcov2 = J^T G J``."""
    J = unproject_jacobian(p, cam)
    return np.swapaxes(J, -1, -2) @ np.asarray(grad3, dtype=float) @ J


def rotate_cov(R, cov) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    return R @ np.asarray(cov, dtype=float) @ np.swapaxes(R, -1, -2)
