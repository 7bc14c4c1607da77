"""Component-major vector algebra for the residual hot path.

Per-point 3-vectors are stored as three contiguous ``(..., N)`` arrays and
symmetric 3x3 covariances as their six unique entries. Elementwise numpy on
contiguous blocks is several times faster than broadcasting over a trailing
axis of length 3, which dominates the cost of batched LM.
"""

from __future__ import annotations

import numpy as np

_SYM = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


def split_vec(v):
    v = np.asarray(v, dtype=float)
    return tuple(np.ascontiguousarray(v[..., i]) for i in range(3))


def split_sym(C):
    C = np.asarray(C, dtype=float)
    return tuple(np.ascontiguousarray(0.5 * (C[..., i, j] + C[..., j, i])) for i, j in _SYM)


def join(v):
    return np.stack(v, axis=-1)


def cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def scale(v, s):
    return (v[0] * s, v[1] * s, v[2] * s)


def add(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def symmul(C, v):
    xx, xy, xz, yy, yz, zz = C
    return (
        xx * v[0] + xy * v[1] + xz * v[2],
        xy * v[0] + yy * v[1] + yz * v[2],
        xz * v[0] + yz * v[1] + zz * v[2],
    )


def pose_components(R, t):
    """Rotation entries and translation components with a trailing point axis."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    Rc = [[R[..., i, j][..., None] for j in range(3)] for i in range(3)]
    tc = tuple(t[..., i][..., None] for i in range(3))
    return Rc, tc


def rotate(Rc, v):
    return tuple(Rc[i][0] * v[0] + Rc[i][1] * v[1] + Rc[i][2] * v[2] for i in range(3))


def rotate_t(Rc, v):
    return tuple(Rc[0][i] * v[0] + Rc[1][i] * v[1] + Rc[2][i] * v[2] for i in range(3))


class PointData:
    """Bearings and bearing covariances of a (batched) problem in component form."""

    def __init__(self, f, fp, cov, covp, _split=True):
        if _split:
            f, fp, cov, covp = split_vec(f), split_vec(fp), split_sym(cov), split_sym(covp)
        self.f, self.fp, self.cov, self.covp = f, fp, cov, covp

    def take(self, idx):
        sel = lambda comps: tuple(c[idx] for c in comps)
        return PointData(sel(self.f), sel(self.fp), sel(self.cov), sel(self.covp), _split=False)

    def without_cov(self):
        zero = tuple(np.zeros_like(c) for c in self.cov)
        return PointData(self.f, self.fp, zero, self.covp, _split=False)


def nec_terms(Rc, tc, pts: PointData):
    """``e = (t x f) . (R fp)`` with the two vectors it is built from."""
    g = rotate(Rc, pts.fp)
    a = cross(tc, pts.f)
    return dot(a, g), g, a


def pnec_terms(Rc, tc, pts: PointData):
    """Residual and both variance quadratic forms, no derivatives."""
    e, g, a = nec_terms(Rc, tc, pts)
    u = cross(g, tc)
    b = rotate_t(Rc, a)
    d1 = dot(u, symmul(pts.cov, u))
    d2 = dot(b, symmul(pts.covp, b))
    return e, d1, d2


def pnec_terms_with_grads(Rc, tc, pts: PointData):
    """Residual, variances and their rotation / ambient translation derivatives."""
    e, g, a = nec_terms(Rc, tc, pts)
    u = cross(g, tc)
    b = rotate_t(Rc, a)
    w = symmul(pts.cov, u)
    cb = symmul(pts.covp, b)
    Sa = rotate(Rc, cb)
    d1 = dot(u, w)
    d2 = dot(b, cb)
    return dict(
        e=e, d1=d1, d2=d2, u=u, b=b,
        de_dx=cross(g, a),
        de_dt=cross(pts.f, g),
        dd1_dx=scale(cross(g, cross(tc, w)), 2.0),
        dd1_dt=scale(cross(w, g), 2.0),
        dd2_dx=scale(cross(Sa, a), 2.0),
        dd2_dt=scale(cross(pts.f, Sa), 2.0),
    )


def whitened_grads(Rc, tc, pts: PointData, reg: float):
    """Whitened residual ``r = e / s`` and its rotation / ambient translation derivatives.

    With ``h = g / s - (r / s^2) R covp R^T a`` the derivative collapses to
    ``dr/dx = h x a - (r / s^2) g x (t x w)`` and ``dr/dt = f x h - (r / s^2) w x g``.
    """
    e, g, a = nec_terms(Rc, tc, pts)
    u = cross(g, tc)
    b = rotate_t(Rc, a)
    w = symmul(pts.cov, u)
    cb = symmul(pts.covp, b)
    Sa = rotate(Rc, cb)
    inv_s = 1.0 / np.sqrt(dot(u, w) + dot(b, cb) + reg)
    r = e * inv_s
    k = -r * inv_s * inv_s
    h = add(scale(g, inv_s), scale(Sa, k))
    gw = dot(g, w) * k
    gt = dot(g, tc) * k
    dx = cross(h, a)
    dx = tuple(dx[i] + tc[i] * gw - w[i] * gt for i in range(3))
    wg = cross(w, g)
    dt = add(cross(pts.f, h), scale(wg, k))
    return r, dx, dt
