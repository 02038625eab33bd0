"""Hot loops: fixed-step RK4 for epsilon-jets of the RDE flow and its variational matrix.

The RDE is ``Z' = A Z + B(Z, theta0 + rot t) + eps (A + I) zeta(t)``. For an
initial condition that is a polynomial in eps we propagate Taylor coefficients

    Z(t; eps0 + s) = sum_k s^k Z_k(t),   M(t; eps0 + s) = sum_k s^k M_k(t),

where ``M`` solves ``M' = (A + D_z B(Z)) M`` with ``M(0) = I`` when ``Z_k(0)``
for k >= 1 are the supplied initial jets. Only x enters B and zeta has a zero
position block, so the jet hierarchy is exact for the cubic nonlinearity.

Two implementations share one contract: a numba ``@njit`` kernel and a
vectorized numpy fallback. ``NHTORI_BACKEND=numpy`` forces the fallback.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
    from numba import njit, prange
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

BACKEND = os.environ.get("NHTORI_BACKEND", "numba" if HAVE_NUMBA else "numpy").lower()
if BACKEND not in ("numba", "numpy"):
    raise ImportError(f"NHTORI_BACKEND must be 'numba' or 'numpy', got {BACKEND!r}")
if BACKEND == "numba" and not HAVE_NUMBA:
    BACKEND = "numpy"


def set_threads(n: int) -> None:
    if HAVE_NUMBA and n > 0:
        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


# --------------------------------------------------------------------------- numba

if HAVE_NUMBA:

    @njit(cache=True)
    def _forcing(theta0, rot, amp, cmap, t, out):
        d, m = cmap.shape
        for c in range(d):
            out[c] = 0.0
        for i in range(m):
            s = amp[i] * math.sin(2.0 * math.pi * (theta0[i] + rot[i] * t))
            for c in range(d):
                out[c] += cmap[c, i] * s

    @njit(cache=True)
    def _rhs(z, M, E, zv, K, Km, d, gamma, delta, eps0, dz, dM, y, sq, cube):
        for c in range(d):
            y[0] = z[0, c] - E[c]
            for k in range(1, K + 1):
                y[k] = z[k, c]
            for k in range(K + 1):
                acc = 0.0
                for i in range(k + 1):
                    acc += y[i] * y[k - i]
                sq[k] = acc
            for k in range(K + 1):
                acc = 0.0
                for i in range(k + 1):
                    acc += sq[i] * y[k - i]
                cube[k] = acc
            for k in range(K + 1):
                dz[k, c] = z[k, d + c]
                dz[k, d + c] = z[k, c] - gamma * z[k, d + c] + delta * cube[k]
            dz[0, d + c] -= E[c]
            dz[0, c] += eps0 * zv[c]
            dz[0, d + c] += eps0 * (1.0 - gamma) * zv[c]
            if K >= 1:
                dz[1, c] += zv[c]
                dz[1, d + c] += (1.0 - gamma) * zv[c]
            n2 = 2 * d
            for k in range(Km + 1):
                for col in range(n2):
                    dM[k, c, col] = M[k, d + c, col]
                    acc = M[k, c, col] - gamma * M[k, d + c, col]
                    for i in range(k + 1):
                        acc += 3.0 * delta * sq[i] * M[k - i, c, col]
                    dM[k, d + c, col] = acc

    @njit(cache=True)
    def _integrate_one(z, M, theta0, zpath, start, spu, n_sub, n_units, eps0,
                       gamma, delta, amp, rot, cmap, blow):
        K = z.shape[0] - 1
        Km = M.shape[0] - 1
        n2 = z.shape[1]
        d = n2 // 2
        dt = 1.0 / (spu * n_sub)
        k1 = np.empty_like(z); k2 = np.empty_like(z); k3 = np.empty_like(z); k4 = np.empty_like(z)
        m1 = np.empty_like(M); m2 = np.empty_like(M); m3 = np.empty_like(M); m4 = np.empty_like(M)
        zt = np.empty_like(z)
        Mt = np.empty_like(M)
        E0 = np.empty(d); Eh = np.empty(d); E1 = np.empty(d)
        zv0 = np.empty(d); zvh = np.empty(d); zv1 = np.empty(d)
        y = np.empty(K + 1); sq = np.empty(K + 1); cube = np.empty(K + 1)
        n_steps = n_units * spu * n_sub
        for step in range(n_steps):
            q = step // n_sub
            f0 = (step - q * n_sub) / n_sub
            fh = f0 + 0.5 / n_sub
            f1 = f0 + 1.0 / n_sub
            a = start + q
            for c in range(d):
                za = zpath[a, c]
                zb = zpath[a + 1, c]
                zv0[c] = za + f0 * (zb - za)
                zvh[c] = za + fh * (zb - za)
                zv1[c] = za + f1 * (zb - za)
            t = step * dt
            _forcing(theta0, rot, amp, cmap, t, E0)
            _forcing(theta0, rot, amp, cmap, t + 0.5 * dt, Eh)
            _forcing(theta0, rot, amp, cmap, t + dt, E1)

            _rhs(z, M, E0, zv0, K, Km, d, gamma, delta, eps0, k1, m1, y, sq, cube)
            for k in range(K + 1):
                for i in range(n2):
                    zt[k, i] = z[k, i] + 0.5 * dt * k1[k, i]
            for k in range(Km + 1):
                for i in range(n2):
                    for j in range(n2):
                        Mt[k, i, j] = M[k, i, j] + 0.5 * dt * m1[k, i, j]
            _rhs(zt, Mt, Eh, zvh, K, Km, d, gamma, delta, eps0, k2, m2, y, sq, cube)
            for k in range(K + 1):
                for i in range(n2):
                    zt[k, i] = z[k, i] + 0.5 * dt * k2[k, i]
            for k in range(Km + 1):
                for i in range(n2):
                    for j in range(n2):
                        Mt[k, i, j] = M[k, i, j] + 0.5 * dt * m2[k, i, j]
            _rhs(zt, Mt, Eh, zvh, K, Km, d, gamma, delta, eps0, k3, m3, y, sq, cube)
            for k in range(K + 1):
                for i in range(n2):
                    zt[k, i] = z[k, i] + dt * k3[k, i]
            for k in range(Km + 1):
                for i in range(n2):
                    for j in range(n2):
                        Mt[k, i, j] = M[k, i, j] + dt * m3[k, i, j]
            _rhs(zt, Mt, E1, zv1, K, Km, d, gamma, delta, eps0, k4, m4, y, sq, cube)
            w = dt / 6.0
            norm2 = 0.0
            finite = True
            for k in range(K + 1):
                for i in range(n2):
                    val = z[k, i] + w * (k1[k, i] + 2.0 * k2[k, i] + 2.0 * k3[k, i] + k4[k, i])
                    z[k, i] = val
                    if not math.isfinite(val):
                        finite = False
                    if k == 0:
                        norm2 += val * val
            for k in range(Km + 1):
                for i in range(n2):
                    for j in range(n2):
                        M[k, i, j] += w * (m1[k, i, j] + 2.0 * m2[k, i, j] + 2.0 * m3[k, i, j] + m4[k, i, j])
            if not finite or math.sqrt(norm2) > blow:
                return (step + 1) * dt
        return np.nan

    @njit(cache=True, parallel=True)
    def _jet_flow_numba(z0, M0, theta0, zeta, ridx, start, spu, n_sub, n_units, eps0,
                        gamma, delta, amp, rot, cmap, blow):
        n = z0.shape[0]
        exit_time = np.empty(n)
        for p in prange(n):
            exit_time[p] = _integrate_one(z0[p], M0[p], theta0[p], zeta[ridx[p]], start[p],
                                          spu, n_sub, n_units, eps0, gamma, delta, amp, rot,
                                          cmap, blow)
        return exit_time


# --------------------------------------------------------------------------- numpy

def _rhs_np(z, M, E, zv, gamma, delta, eps0):
    """Batched right-hand side; z: (n, K+1, 2d), M: (n, Km+1, 2d, 2d)."""
    K = z.shape[1] - 1
    Km = M.shape[1] - 1
    d = z.shape[2] // 2
    x, v = z[:, :, :d], z[:, :, d:]
    y = x.copy()
    y[:, 0] -= E
    sq = np.zeros_like(y)
    cube = np.zeros_like(y)
    for k in range(K + 1):
        for i in range(k + 1):
            sq[:, k] += y[:, i] * y[:, k - i]
    for k in range(K + 1):
        for i in range(k + 1):
            cube[:, k] += sq[:, i] * y[:, k - i]
    dz = np.empty_like(z)
    dz[:, :, :d] = v
    dz[:, :, d:] = x - gamma * v + delta * cube
    dz[:, 0, d:] -= E
    dz[:, 0, :d] += eps0 * zv
    dz[:, 0, d:] += eps0 * (1.0 - gamma) * zv
    if K >= 1:
        dz[:, 1, :d] += zv
        dz[:, 1, d:] += (1.0 - gamma) * zv
    dM = np.empty_like(M)
    if Km >= 0:
        dM[:, :, :d] = M[:, :, d:]
        dM[:, :, d:] = M[:, :, :d] - gamma * M[:, :, d:]
        for k in range(Km + 1):
            for i in range(k + 1):
                dM[:, k, d:] += 3.0 * delta * sq[:, i, :, None] * M[:, k - i, :d]
    return dz, dM


def _jet_flow_numpy(z0, M0, theta0, zeta, ridx, start, spu, n_sub, n_units, eps0,
                    gamma, delta, amp, rot, cmap, blow):
    z = z0
    M = M0
    n = z.shape[0]
    dt = 1.0 / (spu * n_sub)
    exit_time = np.full(n, np.nan)
    alive = np.ones(n, bool)

    def forcing(t):
        return (amp * np.sin(2 * np.pi * (theta0 + rot * t))) @ cmap.T

    for step in range(n_units * spu * n_sub):
        q, r = divmod(step, n_sub)
        za = zeta[ridx, start + q]
        zb = zeta[ridx, start + q + 1]
        f0 = r / n_sub
        zv0 = za + f0 * (zb - za)
        zvh = za + (f0 + 0.5 / n_sub) * (zb - za)
        zv1 = za + (f0 + 1.0 / n_sub) * (zb - za)
        t = step * dt
        E0, Eh, E1 = forcing(t), forcing(t + 0.5 * dt), forcing(t + dt)
        k1, m1 = _rhs_np(z, M, E0, zv0, gamma, delta, eps0)
        k2, m2 = _rhs_np(z + 0.5 * dt * k1, M + 0.5 * dt * m1, Eh, zvh, gamma, delta, eps0)
        k3, m3 = _rhs_np(z + 0.5 * dt * k2, M + 0.5 * dt * m2, Eh, zvh, gamma, delta, eps0)
        k4, m4 = _rhs_np(z + dt * k3, M + dt * m3, E1, zv1, gamma, delta, eps0)
        z_new = z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        M_new = M + dt / 6.0 * (m1 + 2 * m2 + 2 * m3 + m4)
        with np.errstate(invalid="ignore", over="ignore"):
            bad = ~np.isfinite(z_new).all(axis=(1, 2)) | (np.linalg.norm(z_new[:, 0], axis=1) > blow)
        newly = bad & alive
        exit_time[newly] = (step + 1) * dt
        alive &= ~bad
        # frozen rows keep the state at which they left
        z = np.where(alive[:, None, None], z_new, z)
        M = np.where(alive[:, None, None, None], M_new, M)
    z0[...] = z
    M0[...] = M
    return exit_time


def jet_flow(z0, theta0, zeta, ridx, start, *, spu, n_sub, n_units, eps0, gamma, delta,
             amp, rot, cmap, matrix_order=-1, blow=np.inf, backend=None):
    """Integrate jets over ``n_units`` time units.

    Parameters
    ----------
    z0 : (n, K+1, 2d) initial Taylor coefficients in eps.
    theta0 : (n, m) initial phases.
    zeta : (n_real, n_nodes, d) velocity OU samples of each realization.
    ridx, start : (n,) realization index and node index of each trajectory's t = 0.

    Returns ``(z, M, exit_time)`` with ``M`` of shape ``(n, matrix_order+1, 2d, 2d)``
    and ``exit_time`` NaN for trajectories that stayed admissible.
    """
    backend = (backend or BACKEND).lower()
    z = np.array(z0, dtype=np.float64, order="C", copy=True)
    n, n_jets, n2 = z.shape
    if matrix_order >= n_jets:
        z = np.concatenate([z, np.zeros((n, matrix_order + 1 - n_jets, n2))], axis=1)
    M = np.zeros((n, matrix_order + 1, n2, n2))
    if matrix_order >= 0:
        M[:, 0] = np.eye(n2)
    args = (np.ascontiguousarray(theta0, dtype=np.float64),
            np.ascontiguousarray(zeta, dtype=np.float64),
            np.ascontiguousarray(ridx, dtype=np.int64),
            np.ascontiguousarray(start, dtype=np.int64),
            int(spu), int(n_sub), int(n_units), float(eps0), float(gamma), float(delta),
            np.ascontiguousarray(amp, dtype=np.float64), np.ascontiguousarray(rot, dtype=np.float64),
            np.ascontiguousarray(cmap, dtype=np.float64), float(blow))
    if n and int(np.max(start)) + n_units * spu >= zeta.shape[1]:
        raise IndexError("noise realization too short for the requested integration horizon")
    if n and int(np.min(start)) < 0:
        raise IndexError("trajectory starts before the noise support")
    if backend == "numba" and HAVE_NUMBA:
        exit_time = _jet_flow_numba(z, M, *args)
    else:
        exit_time = _jet_flow_numpy(z, M, *args)
    return z, M, exit_time
