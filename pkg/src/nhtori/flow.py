"""Time-1 skew-product map of the RDE, its variational matrix and eps-derivatives.

The RDE obtained from the Langevin SDE through ``z = Z + eps zeta`` reads

    Z' = f(Z + eps zeta(Phi_t omega), theta(t)) + eps zeta(Phi_t omega)
       = A Z + B(Z, theta(t)) + eps (A + I) zeta(Phi_t omega),

the second form because zeta has no position block and B sees positions only.
All integrations are fixed-step RK4 with zeta interpolated linearly between the
nodes of the noise grid; ``n_sub`` integrator steps are taken per noise step.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb, factorial

import numpy as np

from . import _kernels
from .errors import BlowUpError, ConfigError, DependencyError
from .fourier_torus import FourierTorus, synthesize
from .model import ModelParams, drift, forcing_E
from .noise import NoiseRealization

DEFAULT_H = 1.0 / 64


def blow_radius(p: ModelParams) -> float:
    return np.inf if p.n_cut is None else 10.0 * p.n_cut


def stack_zeta(omegas) -> tuple[np.ndarray, int]:
    """Velocity OU samples of realizations sharing one grid, shape (n_real, n_nodes, d)."""
    if isinstance(omegas, NoiseRealization):
        omegas = [omegas]
    first = omegas[0]
    for om in omegas[1:]:
        if om.h != first.h or om.n_nodes != first.n_nodes or om.origin != first.origin:
            raise ValueError("realizations do not share a noise grid")
    return np.stack([om.zeta_v for om in omegas]), first.origin


def propagate(p: ModelParams, jets0, theta0, zeta, ridx, start, *, spu, eps=0.0, n_units=1,
              n_sub=1, matrix_order=-1, backend=None, raise_on_blowup=True):
    """Batched jet flow (see :func:`nhtori._kernels.jet_flow`) with the model's data filled in.

    ``jets0`` is ``(n, K+1, 2d)``; ``start`` are node indices of each trajectory's t = 0.
    """
    jets0 = np.asarray(jets0, float)
    n = jets0.shape[0]
    theta0 = np.broadcast_to(np.asarray(theta0, float), (n, p.m))
    ridx = np.broadcast_to(np.asarray(ridx, np.int64), (n,))
    start = np.broadcast_to(np.asarray(start, np.int64), (n,))
    z, M, exit_time = _kernels.jet_flow(
        jets0, theta0, zeta, ridx, start, spu=spu, n_sub=n_sub, n_units=n_units, eps0=eps,
        gamma=p.gamma, delta=p.delta, amp=p.amp, rot=p.rotation, cmap=p.channel_map,
        matrix_order=matrix_order, blow=blow_radius(p), backend=backend)
    if raise_on_blowup and np.isfinite(exit_time).any():
        i = int(np.flatnonzero(np.isfinite(exit_time))[0])
        raise BlowUpError(f"trajectory {i} left the admissible region at t={exit_time[i]:.4g}; "
                          "enable the cut-off system (model.n_cut)", exit_time=float(exit_time[i]))
    return z, M, exit_time


def _single(p, z0, theta0, omega, offset):
    z0 = np.asarray(z0, float)
    batch = z0.ndim == 2
    z0 = np.atleast_2d(z0)
    theta0 = np.broadcast_to(np.asarray(theta0, float), (z0.shape[0], p.m))
    start = omega.index_of(offset)
    return z0, theta0, start, batch


def time_one_map(z0, theta0, omega: NoiseRealization, eps: float, p: ModelParams, *,
                 offset: float = 0.0, units: int = 1, n_sub: int = 1, cut: bool = False,
                 backend=None) -> np.ndarray:
    """Z(units) from Z(0) = z0 at phase theta0, with zeta read from omega starting at ``offset``.

    Accepts a single state ``(2d,)`` or a batch ``(n, 2d)``.
    """
    z0, theta0, start, batch = _single(p, z0, theta0, omega, offset)
    if cut:
        z1 = _rk4_drift(p, z0, theta0, omega, eps, start, units, n_sub, cut=True)
    else:
        zeta, _ = stack_zeta(omega)
        z1, _, _ = propagate(p, z0[:, None, :], theta0, zeta, 0, start, spu=omega.steps_per_unit,
                             eps=eps, n_units=units, n_sub=n_sub, backend=backend)
        z1 = z1[:, 0]
    return z1 if batch else z1[0]


def variational_matrix(z0, theta0, omega: NoiseRealization, eps: float, p: ModelParams, *,
                       offset: float = 0.0, units: int = 1, n_sub: int = 1, backend=None):
    """D_z of the time-``units`` map at z0, integrated alongside the state."""
    z0, theta0, start, batch = _single(p, z0, theta0, omega, offset)
    zeta, _ = stack_zeta(omega)
    _, M, _ = propagate(p, z0[:, None, :], theta0, zeta, 0, start, spu=omega.steps_per_unit,
                        eps=eps, n_units=units, n_sub=n_sub, matrix_order=0, backend=backend)
    M = M[:, 0]
    return M if batch else M[0]


def _rk4_drift(p, z0, theta0, omega, eps, start, units, n_sub, cut):
    """Plain numpy RK4 on Z' = f(Z + eps zeta) + eps zeta. Used for the cut-off system."""
    spu = omega.steps_per_unit
    dt = 1.0 / (spu * n_sub)
    zv = omega.ou_samples()
    z = z0.copy()
    blow = blow_radius(p)

    def rhs(z, t, zeta):
        th = theta0 + p.rotation * t
        return drift(z + eps * zeta, th, p, cut=cut) + eps * zeta

    for step in range(units * spu * n_sub):
        q, r = divmod(step, n_sub)
        a, b = zv[start + q], zv[start + q + 1]
        f0 = r / n_sub
        za, zh, zb = (a + f * (b - a) for f in (f0, f0 + 0.5 / n_sub, f0 + 1.0 / n_sub))
        t = step * dt
        k1 = rhs(z, t, za)
        k2 = rhs(z + 0.5 * dt * k1, t + 0.5 * dt, zh)
        k3 = rhs(z + 0.5 * dt * k2, t + 0.5 * dt, zh)
        k4 = rhs(z + dt * k3, t + dt, zb)
        z = z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        norm = np.linalg.norm(z, axis=-1)
        if not np.isfinite(z).all() or (norm > blow).any():
            raise BlowUpError("cut-off integration left the admissible region",
                              exit_time=(step + 1) * dt)
    return z


# ------------------------------------------------------------------ Bell hierarchy

@lru_cache(maxsize=None)
def _bell_terms(n: int, k: int) -> tuple:
    """Partial Bell polynomial B_{n,k} as ((coefficient, (j_1, ..., j_n)), ...)."""
    if n == 0 and k == 0:
        return ((1, ()),)
    if n == 0 or k == 0:
        return ()
    # B_{n,k} = sum_i C(n-1, i-1) x_i B_{n-i,k-1}
    acc: dict[tuple, int] = {}
    for i in range(1, n - k + 2):
        for c, powers in _bell_terms(n - i, k - 1):
            pw = list(powers) + [0] * (n - len(powers))
            pw[i - 1] += 1
            key = tuple(pw)
            acc[key] = acc.get(key, 0) + comb(n - 1, i - 1) * c
    return tuple((c, pw) for pw, c in sorted(acc.items()))


def bell_polynomial(n: int, k: int, args):
    """Partial Bell polynomial B_{n,k}(x_1, ..., x_{n-k+1}) with elementwise products."""
    out = 0.0
    for c, powers in _bell_terms(n, k):
        term = float(c)
        for j, e in enumerate(powers):
            if e:
                term = term * args[j] ** e
        out = out + term
    return out


@dataclass(frozen=True, eq=False)
class DerivativeStack:
    """values[k] = d^k Z / d eps^k at eps = 0, each in R^{2d} (or batched)."""

    order: int
    values: np.ndarray

    def taylor(self, eps: float) -> np.ndarray:
        return sum(eps**k / factorial(k) * self.values[k] for k in range(self.order + 1))

    def coefficients(self) -> np.ndarray:
        """Taylor coefficients values[k] / k!."""
        f = np.array([factorial(k) for k in range(self.order + 1)], float)
        return self.values / f.reshape((-1,) + (1,) * (self.values.ndim - 1))


def _dB(y, delta, r):
    """r-th derivative of delta y^3, coordinatewise."""
    return {1: 3 * delta * y**2, 2: 6 * delta * y, 3: 6 * delta * np.ones_like(y)}.get(r, 0.0 * y)


def epsilon_derivatives(z0, theta0, omega: NoiseRealization, p: ModelParams, order: int, *,
                        offset: float = 0.0, units: int = 1, n_sub: int = 1,
                        max_order: int = 3) -> DerivativeStack:
    """eps-derivatives of the flow at eps = 0 from the Bell-polynomial hierarchy.

    Order k >= 2 is driven by sum_r D^r B . B_{k,r}(Z_1 + zeta, Z_2, ..., Z_{k-1}); order 1
    additionally carries the (A + I) zeta forcing. All orders start from 0.
    """
    if order > max_order:
        raise ConfigError(f"derivative order {order} exceeds the smoothness budget {max_order}")
    if order < 0:
        raise ConfigError("derivative order must be non-negative")
    z0, theta0, start, batch = _single(p, z0, theta0, omega, offset)
    d = p.d
    A = p.A
    gamma, delta = p.gamma, p.delta
    spu = omega.steps_per_unit
    dt = 1.0 / (spu * n_sub)
    zv = omega.zeta_v
    n = z0.shape[0]
    Z = np.zeros((order + 1, n, 2 * d))
    Z[0] = z0

    def rhs(Z, t, zeta_v):
        E = forcing_E(theta0 + p.rotation * t, p)
        y = Z[0, :, :d] - E
        out = np.empty_like(Z)
        out[0] = Z[0] @ A.T
        out[0, :, d:] += -E + delta * y**3
        for k in range(1, order + 1):
            out[k] = Z[k] @ A.T
            out[k, :, d:] += _dB(y, delta, 1) * Z[k, :, :d]
            if k == 1:
                out[1, :, :d] += zeta_v
                out[1, :, d:] += (1.0 - gamma) * zeta_v
            for r in range(2, k + 1):
                # zeta has zero position block, so shifting Z_1 by zeta leaves x-arguments unchanged
                args = [Z[j, :, :d] for j in range(1, k)]
                out[k, :, d:] += _dB(y, delta, r) * bell_polynomial(k, r, args)
        return out

    for step in range(units * spu * n_sub):
        q, r = divmod(step, n_sub)
        a, b = zv[start + q], zv[start + q + 1]
        f0 = r / n_sub
        za, zh, zb = (a + f * (b - a) for f in (f0, f0 + 0.5 / n_sub, f0 + 1.0 / n_sub))
        t = step * dt
        k1 = rhs(Z, t, za)
        k2 = rhs(Z + 0.5 * dt * k1, t + 0.5 * dt, zh)
        k3 = rhs(Z + 0.5 * dt * k2, t + 0.5 * dt, zh)
        k4 = rhs(Z + dt * k3, t + dt, zb)
        Z = Z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.isfinite(Z).all():
        raise BlowUpError("eps-derivative hierarchy overflowed", exit_time=units)
    return DerivativeStack(order, Z if batch else Z[:, 0])


def epsilon_jets(z0, theta0, omega: NoiseRealization, p: ModelParams, order: int, *,
                 offset: float = 0.0, units: int = 1, n_sub: int = 1, backend=None) -> DerivativeStack:
    """Same quantity as :func:`epsilon_derivatives` via Taylor-jet propagation in the kernel."""
    z0, theta0, start, batch = _single(p, z0, theta0, omega, offset)
    jets = np.zeros((z0.shape[0], order + 1, 2 * p.d))
    jets[:, 0] = z0
    zeta, _ = stack_zeta(omega)
    z, _, _ = propagate(p, jets, theta0, zeta, 0, start, spu=omega.steps_per_unit, n_units=units,
                        n_sub=n_sub, backend=backend)
    vals = z * np.array([factorial(k) for k in range(order + 1)], float)[None, :, None]
    vals = np.moveaxis(vals, 1, 0)
    return DerivativeStack(order, vals if batch else vals[:, 0])


def remainder_R(k: int, coeffs, theta, omega: NoiseRealization, p: ModelParams, *,
                offset: float = 0.0, n_sub: int = 1, backend=None) -> np.ndarray:
    """R_{k-1}(theta, omega): the K_k-independent part of the order-k coefficient of F(K_eps).

    ``coeffs`` holds K_0, ..., K_{k-1}, each either a FourierTorus (for K_j(., omega) at this
    omega) or an array of values at ``theta``. Propagating the eps-jet with initial data
    (K_0, ..., K_{k-1}, 0) gives F_k with K_k = 0, which is exactly R_{k-1}; this includes all
    mixed D_z^r D_eps^s terms.
    """
    if k < 1:
        raise ValueError("remainder index k must be >= 1")
    if len(coeffs) < k:
        raise DependencyError(f"R_{k - 1} needs K_0..K_{k - 1}; only {len(coeffs)} supplied")
    theta = np.asarray(theta, float)
    single = theta.ndim == 1
    pts = np.atleast_2d(theta)
    vals = []
    for c in coeffs[:k]:
        if c is None:
            raise DependencyError("missing lower-order coefficient")
        v = synthesize(c, pts) if isinstance(c, FourierTorus) else np.atleast_2d(np.asarray(c, float))
        vals.append(np.broadcast_to(v, (pts.shape[0], 2 * p.d)))
    jets = np.zeros((pts.shape[0], k + 1, 2 * p.d))
    jets[:, :k] = np.stack(vals, axis=1)
    zeta, _ = stack_zeta(omega)
    z, _, _ = propagate(p, jets, pts, zeta, 0, omega.index_of(offset), spu=omega.steps_per_unit,
                        n_sub=n_sub, backend=backend)
    R = z[:, k]
    return R[0] if single else R


# ------------------------------------------------------------------ SDE side

def euler_maruyama(z0, theta0, omega: NoiseRealization, eps: float, p: ModelParams, *,
                   t: float = 1.0, stride: int = 1, offset: float = 0.0, cut: bool = False):
    """EM for dz = f(z, theta(t)) dt + eps sigma dW using omega's increments aggregated by ``stride``."""
    z = np.atleast_2d(np.asarray(z0, float)).copy()
    theta0 = np.broadcast_to(np.asarray(theta0, float), (z.shape[0], p.m))
    h = omega.h * stride
    n_steps = int(round(t / h))
    if abs(n_steps * h - t) > 1e-9:
        raise ValueError(f"horizon {t} is not a multiple of the EM step {h}")
    i0 = omega.index_of(offset)
    inc = omega.increments[i0:i0 + n_steps * stride]
    if inc.shape[0] < n_steps * stride:
        raise IndexError("noise realization too short for the requested horizon")
    inc = inc.reshape(n_steps, stride, p.d).sum(axis=1)
    d = p.d
    for j in range(n_steps):
        th = theta0 + p.rotation * (j * h)
        z = z + h * drift(z, th, p, cut=cut)
        z[:, d:] += eps * inc[j]
    return z if np.ndim(z0) == 2 else z[0]
