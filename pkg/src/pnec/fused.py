"""Compiled per-problem normal equations for the LM inner loop.

For every selected problem the kernels accumulate ``E = sum r^2``,
``J^T J`` and ``J^T r`` with ``J`` the ambient ``(x, t)`` Jacobian of the
residuals, without materializing per-point arrays. The arithmetic mirrors
:func:`pnec.kernels.whitened_grads`. Set ``PNEC_DISABLE_JIT=1`` (or run
without numba) to use the numpy path instead.
"""

from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba
except ImportError:  # pragma: no cover
    numba = None

AVAILABLE = numba is not None and os.environ.get("PNEC_DISABLE_JIT", "") not in ("1", "true", "yes")


def _pnec_normal_equations(R, t, f, fp, cov, covp, reg, idx, E, G, gv):
    for m in range(idx.shape[0]):
        b = idx[m]
        J = np.empty(6)
        Em = 0.0
        for i in range(6):
            gv[m, i] = 0.0
            for j in range(6):
                G[m, i, j] = 0.0
        t0, t1, t2 = t[m, 0], t[m, 1], t[m, 2]
        for n in range(f.shape[1]):
            f0, f1, f2 = f[b, n, 0], f[b, n, 1], f[b, n, 2]
            q0, q1, q2 = fp[b, n, 0], fp[b, n, 1], fp[b, n, 2]
            g0 = R[m, 0, 0] * q0 + R[m, 0, 1] * q1 + R[m, 0, 2] * q2
            g1 = R[m, 1, 0] * q0 + R[m, 1, 1] * q1 + R[m, 1, 2] * q2
            g2 = R[m, 2, 0] * q0 + R[m, 2, 1] * q1 + R[m, 2, 2] * q2
            a0 = t1 * f2 - t2 * f1
            a1 = t2 * f0 - t0 * f2
            a2 = t0 * f1 - t1 * f0
            e = a0 * g0 + a1 * g1 + a2 * g2
            u0 = g1 * t2 - g2 * t1
            u1 = g2 * t0 - g0 * t2
            u2 = g0 * t1 - g1 * t0
            c = cov[b, n]
            w0 = c[0, 0] * u0 + c[0, 1] * u1 + c[0, 2] * u2
            w1 = c[1, 0] * u0 + c[1, 1] * u1 + c[1, 2] * u2
            w2 = c[2, 0] * u0 + c[2, 1] * u1 + c[2, 2] * u2
            b0 = R[m, 0, 0] * a0 + R[m, 1, 0] * a1 + R[m, 2, 0] * a2
            b1 = R[m, 0, 1] * a0 + R[m, 1, 1] * a1 + R[m, 2, 1] * a2
            b2 = R[m, 0, 2] * a0 + R[m, 1, 2] * a1 + R[m, 2, 2] * a2
            cp = covp[b, n]
            c0 = cp[0, 0] * b0 + cp[0, 1] * b1 + cp[0, 2] * b2
            c1 = cp[1, 0] * b0 + cp[1, 1] * b1 + cp[1, 2] * b2
            c2 = cp[2, 0] * b0 + cp[2, 1] * b1 + cp[2, 2] * b2
            s0 = R[m, 0, 0] * c0 + R[m, 0, 1] * c1 + R[m, 0, 2] * c2
            s1 = R[m, 1, 0] * c0 + R[m, 1, 1] * c1 + R[m, 1, 2] * c2
            s2 = R[m, 2, 0] * c0 + R[m, 2, 1] * c1 + R[m, 2, 2] * c2
            var = (u0 * w0 + u1 * w1 + u2 * w2) + (b0 * c0 + b1 * c1 + b2 * c2) + reg
            inv_s = 1.0 / np.sqrt(var)
            r = e * inv_s
            k = -r * inv_s * inv_s
            h0 = g0 * inv_s + k * s0
            h1 = g1 * inv_s + k * s1
            h2 = g2 * inv_s + k * s2
            gw = (g0 * w0 + g1 * w1 + g2 * w2) * k
            gt = (g0 * t0 + g1 * t1 + g2 * t2) * k
            J[0] = h1 * a2 - h2 * a1 + t0 * gw - w0 * gt
            J[1] = h2 * a0 - h0 * a2 + t1 * gw - w1 * gt
            J[2] = h0 * a1 - h1 * a0 + t2 * gw - w2 * gt
            J[3] = f1 * h2 - f2 * h1 + k * (w1 * g2 - w2 * g1)
            J[4] = f2 * h0 - f0 * h2 + k * (w2 * g0 - w0 * g2)
            J[5] = f0 * h1 - f1 * h0 + k * (w0 * g1 - w1 * g0)
            Em += r * r
            for i in range(6):
                gv[m, i] += J[i] * r
                for j in range(i, 6):
                    G[m, i, j] += J[i] * J[j]
        for i in range(6):
            for j in range(i):
                G[m, i, j] = G[m, j, i]
        E[m] = Em


def _nec_normal_equations(R, t, f, fp, wts, idx, E, G, gv):
    for m in range(idx.shape[0]):
        b = idx[m]
        J = np.empty(6)
        Em = 0.0
        for i in range(6):
            gv[m, i] = 0.0
            for j in range(6):
                G[m, i, j] = 0.0
        t0, t1, t2 = t[m, 0], t[m, 1], t[m, 2]
        for n in range(f.shape[1]):
            sw = np.sqrt(wts[b, n])
            f0, f1, f2 = f[b, n, 0], f[b, n, 1], f[b, n, 2]
            q0, q1, q2 = fp[b, n, 0], fp[b, n, 1], fp[b, n, 2]
            g0 = R[m, 0, 0] * q0 + R[m, 0, 1] * q1 + R[m, 0, 2] * q2
            g1 = R[m, 1, 0] * q0 + R[m, 1, 1] * q1 + R[m, 1, 2] * q2
            g2 = R[m, 2, 0] * q0 + R[m, 2, 1] * q1 + R[m, 2, 2] * q2
            a0 = t1 * f2 - t2 * f1
            a1 = t2 * f0 - t0 * f2
            a2 = t0 * f1 - t1 * f0
            r = sw * (a0 * g0 + a1 * g1 + a2 * g2)
            J[0] = sw * (g1 * a2 - g2 * a1)
            J[1] = sw * (g2 * a0 - g0 * a2)
            J[2] = sw * (g0 * a1 - g1 * a0)
            J[3] = sw * (f1 * g2 - f2 * g1)
            J[4] = sw * (f2 * g0 - f0 * g2)
            J[5] = sw * (f0 * g1 - f1 * g0)
            Em += r * r
            for i in range(6):
                gv[m, i] += J[i] * r
                for j in range(i, 6):
                    G[m, i, j] += J[i] * J[j]
        for i in range(6):
            for j in range(i):
                G[m, i, j] = G[m, j, i]
        E[m] = Em


if AVAILABLE:
    _pnec_kernel = numba.njit(cache=True, nogil=True, error_model="numpy")(_pnec_normal_equations)
    _nec_kernel = numba.njit(cache=True, nogil=True, error_model="numpy")(_nec_normal_equations)
else:  # pragma: no cover
    _pnec_kernel = _pnec_normal_equations
    _nec_kernel = _nec_normal_equations


def _outputs(m):
    return np.empty(m), np.empty((m, 6, 6)), np.empty((m, 6))


def pnec_normal_equations(R, t, f, fp, cov, covp, reg, idx):
    """``(E, J^T J, J^T r)`` of the whitened symmetric residuals for problems ``idx``.

    ``R``/``t`` hold one pose per selected problem; the data arrays are
    ``(B, N, ...)`` and indexed by ``idx``.
    """
    E, G, gv = _outputs(idx.shape[0])
    _pnec_kernel(R, t, f, fp, cov, covp, float(reg), idx, E, G, gv)
    return E, G, gv


def nec_normal_equations(R, t, f, fp, weights, idx):
    E, G, gv = _outputs(idx.shape[0])
    _nec_kernel(R, t, f, fp, weights, idx, E, G, gv)
    return E, G, gv
