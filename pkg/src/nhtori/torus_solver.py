"""Deterministic invariant torus K0, its adapted frame (P0, Lam0), and margin certificates.

All quantities live on a uniform torus grid and are stored as Fourier series. Linear
solves along theta -> theta + alpha use the same orbit sweeps as the stochastic
expansion, with orbit data synthesized from the Fourier representation.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import schur, solve_sylvester

from . import flow
from .errors import CertificationError, DivergenceError, NonHyperbolicError
from .fourier_torus import (FourierTorus, TorusGrid, analyze, analyze_matrix, matrix_on_grid,
                            on_grid, rotate, synthesize, synthesize_matrix)
from .model import ModelParams
from .noise import NoiseRealization
from .perturbation import (CohomologicalRHS, cohomological_solve, matrix_sweep_SU,
                           matrix_sweep_US, tail_terms)

TAIL_RATIO = 1e-8


@dataclass(frozen=True, eq=False)
class AdaptedFrame:
    P0: FourierTorus          # flattened 2d x 2d frames
    Lambda0: FourierTorus     # flattened block-diagonal matrices
    d_S: int
    d_U: int
    margins: tuple[float, float]
    cond: float
    residual: float
    certified: bool
    iterations: int = 0
    notes: tuple[str, ...] = ()

    @property
    def n2(self) -> int:
        return self.d_S + self.d_U

    def P(self, theta) -> np.ndarray:
        return synthesize_matrix(self.P0, theta)

    def Lam(self, theta) -> np.ndarray:
        return synthesize_matrix(self.Lambda0, theta)


@dataclass(frozen=True, eq=False)
class DeterministicTorus:
    K0: FourierTorus
    residual: float
    frame: AdaptedFrame
    history: tuple[float, ...] = ()
    grid: TorusGrid | None = None


# ------------------------------------------------------------------ deterministic evaluations

def _zero_noise(p: ModelParams, h: float, units: int = 1) -> NoiseRealization:
    return NoiseRealization.zeros(h, 0.0, float(units), p.d)


def map_and_jacobian(z, theta, p: ModelParams, *, h: float = flow.DEFAULT_H, n_sub: int = 1,
                     backend=None):
    """F0(z, theta) and D_z F0 for a batch of states."""
    om = _zero_noise(p, h)
    zeta, _ = flow.stack_zeta(om)
    z1, M, _ = flow.propagate(p, np.atleast_2d(z)[:, None, :], np.atleast_2d(theta), zeta, 0, 0,
                              spu=om.steps_per_unit, n_sub=n_sub, matrix_order=0, backend=backend)
    return z1[:, 0], M[:, 0]


def _check_tail(t: FourierTorus, what: str):
    if t.tail_ratio() > TAIL_RATIO:
        raise CertificationError(
            f"{what}: outermost Fourier shell carries {t.tail_ratio():.2e} of the peak coefficient "
            f"(limit {TAIL_RATIO:g}); increase the mode count")


def invariance_residual(K: FourierTorus, p: ModelParams, *, eps: float = 0.0, omegas=None,
                        K_next=None, grid: TorusGrid | None = None, h: float = flow.DEFAULT_H,
                        n_sub: int = 1, backend=None) -> float:
    """max over grid nodes (and realizations) of |F(K(theta), theta, omega, eps) - K(theta + alpha)|.

    ``K_next`` replaces K(theta + alpha) when the image torus differs (values at the shifted
    nodes or a FourierTorus evaluated at theta + alpha).
    """
    grid = grid or TorusGrid.for_modes(K.modes)
    theta = grid.nodes()
    z = on_grid(K, grid).reshape(grid.size, -1)
    if K_next is None:
        target = synthesize(K, np.mod(theta + p.rotation, 1.0))
    elif isinstance(K_next, FourierTorus):
        target = synthesize(K_next, np.mod(theta + p.rotation, 1.0))
    else:
        target = np.asarray(K_next, float).reshape(grid.size, -1)
    if omegas is None:
        z1, _ = map_and_jacobian(z, theta, p, h=h, n_sub=n_sub, backend=backend)
        return float(np.linalg.norm(z1 - target, axis=-1).max())
    worst = 0.0
    for om in ([omegas] if isinstance(omegas, NoiseRealization) else omegas):
        z1 = flow.time_one_map(z, theta, om, eps, p, n_sub=n_sub, backend=backend)
        worst = max(worst, float(np.linalg.norm(z1 - target, axis=-1).max()))
    return worst


# ------------------------------------------------------------------ frames

def _split_schur(Mbar):
    """Constant frame V with V^{-1} Mbar V = blockdiag(S, U), |eig S| < 1 < |eig U|."""
    ev = np.linalg.eigvals(Mbar)
    if np.min(np.abs(np.abs(ev) - 1.0)) < 1e-8:
        raise NonHyperbolicError(f"eigenvalue on the unit circle: {ev}")
    T, Z, d_S = schur(Mbar, output="real", sort="iuc")
    n = Mbar.shape[0]
    if 0 < d_S < n:
        s_mod = np.abs(ev)[np.abs(ev) < 1].max()
        u_mod = np.abs(ev)[np.abs(ev) > 1].min()
        if u_mod - s_mod < 1e-8:
            raise NonHyperbolicError("stable and unstable spectra collide")
        X = solve_sylvester(T[:d_S, :d_S], -T[d_S:, d_S:], -T[:d_S, d_S:])
        W = np.eye(n)
        W[:d_S, d_S:] = X
        V = Z @ W
    else:
        V = Z
    return V, int(d_S)


def conjugated(P: FourierTorus, M_grid, grid: TorusGrid, rotation) -> np.ndarray:
    """P^{-1}(theta + alpha) M(theta) P(theta) at the grid nodes."""
    Pg = matrix_on_grid(P, grid).reshape((grid.size,) + M_grid.shape[-2:])
    Pn = matrix_on_grid(rotate(P, rotation), grid).reshape(Pg.shape)
    return np.linalg.solve(Pn, M_grid.reshape(Pg.shape) @ Pg)


def _orbit_points(theta, rotation, lo, hi):
    d = np.arange(lo, hi + 1)
    return np.mod(theta[:, None, :] + d[None, :, None] * rotation, 1.0)


def _eval_on_orbits(t: FourierTorus, pts, matrix=True):
    n, J, m = pts.shape
    v = synthesize_matrix(t, pts.reshape(-1, m)) if matrix else synthesize(t, pts.reshape(-1, m))
    return v.reshape((n, J) + v.shape[1:])


def block_norms(lam_grid, d_S):
    """Per-node ||Lam^S|| and ||(Lam^U)^{-1}||."""
    s = np.linalg.norm(lam_grid[..., :d_S, :d_S], ord=2, axis=(-2, -1)) if d_S else np.zeros(len(lam_grid))
    u = (np.linalg.norm(np.linalg.inv(lam_grid[..., d_S:, d_S:]), ord=2, axis=(-2, -1))
         if d_S < lam_grid.shape[-1] else np.zeros(len(lam_grid)))
    return s, u


def solve_reducibility(K0: FourierTorus, p: ModelParams, *, grid: TorusGrid | None = None,
                       modes=None, tol_red: float = 1e-9, cond_max: float = 1e6,
                       max_iter: int = 40, h: float = flow.DEFAULT_H, n_sub: int = 1,
                       P_init: FourierTorus | None = None, M_grid=None, backend=None) -> AdaptedFrame:
    """Adapted frame for the cocycle (M0, alpha) along K0.

    Starts from the Schur splitting of the theta-averaged M0 (or ``P_init``) and applies
    P <- P (I + Q), with Q off-block-diagonal solving the linearized block equations,
    until the off-diagonal blocks of P^{-1}(theta + alpha) M0 P fall below ``tol_red``.
    """
    modes = tuple(modes) if modes is not None else K0.modes
    grid = grid or TorusGrid.for_modes(modes)
    theta = grid.nodes()
    n2 = 2 * p.d
    if M_grid is None:
        _, M_grid = map_and_jacobian(on_grid(K0, grid).reshape(grid.size, -1), theta, p, h=h,
                                     n_sub=n_sub, backend=backend)
    Mbar = M_grid.mean(axis=0)
    V, d_S = _split_schur(Mbar)
    if P_init is None:
        P = FourierTorus.constant(V.ravel(), modes)
    else:
        P = P_init
    rot = p.rotation
    it = 0
    for it in range(max_iter + 1):
        lam = conjugated(P, M_grid, grid, rot)
        off = np.zeros_like(lam)
        off[:, :d_S, d_S:] = lam[:, :d_S, d_S:]
        off[:, d_S:, :d_S] = lam[:, d_S:, :d_S]
        err = float(np.abs(off).max())
        if err <= tol_red or it == max_iter:
            break
        lam_t = analyze_matrix(lam.reshape(grid.shape + (n2, n2)), modes, grid)
        sn, un = block_norms(lam, d_S)
        rate = float(sn.max() * un.max())
        if rate >= 1:
            raise NonHyperbolicError(f"block contraction rate {rate:.4g} >= 1")
        N = tail_terms(rate, max(err, 1e-300), 1e-3 * tol_red) + 1
        pts = _orbit_points(theta, rot, -N, N)
        L = _eval_on_orbits(lam_t, pts)
        S, U = L[..., :d_S, :d_S], L[..., d_S:, d_S:]
        qSU = matrix_sweep_SU(S, U, L[..., :d_S, d_S:])[:, N]
        qUS = matrix_sweep_US(S, U, L[..., d_S:, :d_S])[:, N]
        Q = np.zeros((grid.size, n2, n2))
        Q[:, :d_S, d_S:] = qSU
        Q[:, d_S:, :d_S] = qUS
        Pg = matrix_on_grid(P, grid).reshape(grid.size, n2, n2)
        P = analyze_matrix((Pg @ (np.eye(n2) + Q)).reshape(grid.shape + (n2, n2)), modes, grid)
    lam = conjugated(P, M_grid, grid, rot)
    diag = np.zeros_like(lam)
    diag[:, :d_S, :d_S] = lam[:, :d_S, :d_S]
    diag[:, d_S:, d_S:] = lam[:, d_S:, d_S:]
    Lambda0 = analyze_matrix(diag.reshape(grid.shape + (n2, n2)), modes, grid)
    resid = float(np.abs(lam - matrix_on_grid(Lambda0, grid).reshape(lam.shape)).max())
    Pg = matrix_on_grid(P, grid).reshape(grid.size, n2, n2)
    cond = float(np.linalg.cond(Pg).max())
    notes = []
    if resid > tol_red:
        notes.append(f"reducibility residual {resid:.3e} exceeds tol_red {tol_red:g}")
    if cond > cond_max:
        raise CertificationError(f"frame condition number {cond:.3e} exceeds cond_max {cond_max:g}")
    sn, un = block_norms(matrix_on_grid(Lambda0, TorusGrid.for_modes(modes, 4)).reshape(-1, n2, n2), d_S)
    margins = (float(sn.max()), float(un.max()))
    if not (margins[0] < 1 and margins[1] < 1):
        notes.append(f"margins {margins} not both < 1")
    certified = not notes
    return AdaptedFrame(P, Lambda0, d_S, n2 - d_S, margins, cond, resid, certified, it, tuple(notes))


def hyperbolicity_margin(frame: AdaptedFrame, N_probe: int = 64):
    """(lam_S_hat, lam_U_hat, c_H_hat) from a dense probe grid.

    c_H_hat = cond(P0) * [1/(1 - lam_S) + lam_U/(1 - lam_U) + 1].
    """
    m = frame.P0.m
    grid = TorusGrid((N_probe,) * m)
    n2 = frame.n2
    lam = matrix_on_grid(frame.Lambda0, grid).reshape(-1, n2, n2)
    sn, un = block_norms(lam, frame.d_S)
    lS, lU = float(sn.max()), float(un.max())
    if not (lS < 1 and lU < 1):
        raise NonHyperbolicError(f"margins lam_S={lS:.4g}, lam_U={lU:.4g}: not hyperbolic")
    Pg = matrix_on_grid(frame.P0, grid).reshape(-1, n2, n2)
    cond = float(np.linalg.cond(Pg).max())
    c_H = cond * (1 / (1 - lS) + lU / (1 - lU) + 1)
    return lS, lU, c_H


def rescale_frame(frame: AdaptedFrame, S, K0: FourierTorus, p: ModelParams, **kw) -> AdaptedFrame:
    """Frame P0 S for a constant matrix S, with Lam0 recomputed from the cocycle."""
    S = np.asarray(S, float)
    modes = frame.P0.modes
    grid = TorusGrid.for_modes(modes)
    n2 = frame.n2
    Pg = matrix_on_grid(frame.P0, grid).reshape(grid.size, n2, n2) @ S
    P = analyze_matrix(Pg.reshape(grid.shape + (n2, n2)), modes, grid)
    _, M_grid = map_and_jacobian(on_grid(K0, grid).reshape(grid.size, -1), grid.nodes(), p, **kw)
    lam = conjugated(P, M_grid, grid, p.rotation)
    Lambda0 = analyze_matrix(lam.reshape(grid.shape + (n2, n2)), modes, grid)
    sn, un = block_norms(lam, frame.d_S)
    return AdaptedFrame(P, Lambda0, frame.d_S, frame.d_U, (float(sn.max()), float(un.max())),
                        float(np.linalg.cond(Pg).max()), frame.residual, frame.certified)


# ------------------------------------------------------------------ Newton for K0

def solve_K0(p: ModelParams, K_init: FourierTorus | None = None, *, modes=(16,) , grid=None,
             tol_inv: float = 1e-9, tol_red: float = 1e-9, cond_max: float = 1e6,
             max_newton: int = 25, h: float = flow.DEFAULT_H, n_sub: int = 1,
             backend=None) -> DeterministicTorus:
    """Newton iteration on F0(K(theta), theta) = K(theta + alpha).

    Each step solves M0 dK - dK o T = -e in the adapted frame of the current iterate with
    the orbit sweeps of :func:`nhtori.perturbation.cohomological_solve`.
    """
    modes = tuple(K_init.modes) if K_init is not None else tuple(int(n) for n in np.broadcast_to(modes, (p.m,)))
    grid = grid or TorusGrid.for_modes(modes)
    grid.check_modes(modes)
    K = K_init if K_init is not None else FourierTorus.zeros(modes, 2 * p.d)
    theta = grid.nodes()
    rot = p.rotation
    n2 = 2 * p.d
    history = []
    growth = 0
    frame = None
    for it in range(max_newton + 1):
        z = on_grid(K, grid).reshape(grid.size, n2)
        z1, M_grid = map_and_jacobian(z, theta, p, h=h, n_sub=n_sub, backend=backend)
        e = z1 - synthesize(K, np.mod(theta + rot, 1.0))
        r = float(np.linalg.norm(e, axis=-1).max())
        history.append(r)
        if len(history) > 1 and r > history[-2]:
            growth += 1
            if growth >= 3:
                raise DivergenceError(f"Newton residual grew three times in a row: {history}")
        else:
            growth = 0
        frame = solve_reducibility(K, p, grid=grid, modes=modes, tol_red=tol_red, cond_max=cond_max,
                                   h=h, n_sub=n_sub, P_init=frame.P0 if frame else None,
                                   M_grid=M_grid, backend=backend)
        if r <= tol_inv:
            break
        if it == max_newton:
            raise DivergenceError(f"Newton did not reach tol_inv={tol_inv:g} in {max_newton} steps "
                                  f"(last residual {r:.3e})")
        if not frame.certified:
            raise NonHyperbolicError("; ".join(frame.notes))
        e_t = analyze(e.reshape(grid.shape + (n2,)), modes, grid)
        tol_lin = min(1e-3 * tol_inv, 1e-3 * r * r)
        lS, lU = frame.margins
        NS = tail_terms(lS, 2 * r, tol_lin) + 1
        NU = tail_terms(lU, 2 * r, tol_lin) + 1
        pts = _orbit_points(theta, rot, -NS - 1, NU + 1)
        Pn = _eval_on_orbits(frame.P0, pts[:, 1:])
        L = _eval_on_orbits(frame.Lambda0, pts[:, :-1])
        ev = _eval_on_orbits(e_t, pts[:, :-1], matrix=False)
        et = np.linalg.solve(Pn, ev[..., None])[..., 0]
        s = frame.d_S
        sol = cohomological_solve(L[..., :s, :s], L[..., s:, s:],
                                  CohomologicalRHS(et[..., :s], et[..., s:], first_depth=-NS - 1),
                                  tol=tol_lin, margins=frame.margins, need=(0, 0))
        dS, dU = sol.at(0)
        P_here = synthesize_matrix(frame.P0, theta)
        dK = np.einsum("nab,nb->na", P_here, np.concatenate([dS, dU], axis=-1))
        K = K + analyze(dK.reshape(grid.shape + (n2,)), modes, grid)
    if float(np.abs(K.coeffs).max()) > 0:
        _check_tail(K, "K0")
    if not frame.certified:
        raise NonHyperbolicError("; ".join(frame.notes))
    return DeterministicTorus(K, history[-1], frame, tuple(history), grid)


def cocycle_product_spectrum(frame: AdaptedFrame, theta0, rotation, N: int) -> np.ndarray:
    """Sorted eigenvalue moduli of Lam0(theta0 + (N-1) alpha) ... Lam0(theta0)."""
    prod = np.eye(frame.n2)
    for j in range(N):
        prod = frame.Lam(np.mod(np.asarray(theta0) + j * rotation, 1.0)) @ prod
    return np.sort(np.abs(np.linalg.eigvals(prod)))
