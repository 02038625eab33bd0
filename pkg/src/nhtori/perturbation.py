"""Noise-expansion coefficients K_k(theta, omega) and the first-order frame correction.

Everything random is computed along orbits of the skew product,
``T^j(theta, omega) = (theta + j alpha, Phi_j omega)``. An orbit window stores data at
depths ``lo..hi``; the cohomological equation

    Lam(T^j) u(T^j) - u(T^{j+1}) = -r(T^j)

is solved by running the stable block forward from ``lo`` and the unstable block
backward from ``hi``, both started from zero. Truncation error decays like
``lam_S^(j - lo)`` and ``lam_U^(hi + 1 - j)``, so each solve shrinks the window of
certified depths by the two tail lengths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import flow
from .errors import CertificationError, DependencyError, NonHyperbolicError
from .fourier_torus import FourierTorus, TorusGrid, analyze, synthesize, synthesize_matrix
from .model import ModelParams
from .noise import NoiseRealization, sample_path, realization_seed


# ------------------------------------------------------------------ cohomological solves

@dataclass(frozen=True, eq=False)
class CohomologicalRHS:
    """Frame-coordinate right-hand side along orbits.

    ``stable`` is ``(n, J, d_S)`` and ``unstable`` ``(n, J, d_U)``; position 0 is orbit
    depth ``first_depth``.
    """

    stable: np.ndarray
    unstable: np.ndarray
    first_depth: int = 0

    def __post_init__(self):
        for name in ("stable", "unstable"):
            a = np.asarray(getattr(self, name), float)
            if a.ndim != 3:
                raise ValueError(f"{name} block must be (n, depth, dim), got {a.shape}")
            if not np.isfinite(a).all():
                raise ValueError(f"non-finite entries in the {name} right-hand side")
            object.__setattr__(self, name, a)
        if self.stable.shape[:2] != self.unstable.shape[:2]:
            raise ValueError("stable and unstable blocks cover different orbits")

    @property
    def n_depth(self) -> int:
        return self.stable.shape[1]

    def norm(self) -> float:
        s = np.linalg.norm(self.stable, axis=-1).max(initial=0.0)
        u = np.linalg.norm(self.unstable, axis=-1).max(initial=0.0)
        return float(max(s, u))


@dataclass(frozen=True, eq=False)
class CohomologicalSolution:
    stable: np.ndarray      # (n, J, d_S); NaN where not certified
    unstable: np.ndarray    # (n, J, d_U)
    first_depth: int
    valid: tuple[int, int]  # certified depth range, inclusive
    tail_S: float
    tail_U: float
    n_terms: tuple[int, int]

    def at(self, depth: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.valid
        if not lo <= depth <= hi:
            raise CertificationError(f"depth {depth} outside the certified window {self.valid}")
        i = depth - self.first_depth
        return self.stable[:, i], self.unstable[:, i]


def tail_terms(lam: float, norm: float, tol: float) -> int:
    """Smallest N with lam^(N+1) * norm / (1 - lam) <= tol."""
    if norm == 0.0 or lam == 0.0:
        return 0
    n = math.log(tol * (1 - lam) / norm) / math.log(lam) - 1
    return max(0, int(math.ceil(n - 1e-12)))


def _series_tail(lam, norm, n_terms):
    return lam ** (n_terms + 1) * norm / (1 - lam)


def stable_sweep(lam, r):
    """u_{j+1} = lam_j u_j + r_j with u_0 = 0; returns u at positions 0..J-1."""
    n, J, k = r.shape
    u = np.zeros((n, J, k))
    for j in range(J - 1):
        u[:, j + 1] = np.einsum("nab,nb->na", lam[:, j], u[:, j]) + r[:, j]
    return u


def unstable_sweep(lam, r):
    """u_j = lam_j^{-1} (u_{j+1} - r_j) with u_J = 0; returns u at positions 0..J-1."""
    n, J, k = r.shape
    u = np.zeros((n, J + 1, k))
    for j in range(J - 1, -1, -1):
        u[:, j] = np.linalg.solve(lam[:, j], (u[:, j + 1] - r[:, j])[..., None])[..., 0]
    return u[:, :J]


def block_margins(lam_S, lam_U) -> tuple[float, float]:
    """Sup of ||Lam^S|| and ||(Lam^U)^{-1}|| over the supplied samples."""
    s = np.linalg.norm(lam_S, ord=2, axis=(-2, -1)).max(initial=0.0) if lam_S.size else 0.0
    u = np.linalg.norm(np.linalg.inv(lam_U), ord=2, axis=(-2, -1)).max(initial=0.0) if lam_U.size else 0.0
    return float(s), float(u)


def cohomological_solve(lam_S, lam_U, rhs: CohomologicalRHS, *, tol: float = 1e-6,
                        margins: tuple[float, float] | None = None,
                        need: tuple[int, int] | None = None) -> CohomologicalSolution:
    """Solve Lam u - u o T = -r block-wise along the orbits of ``rhs``.

    ``lam_S`` / ``lam_U`` are ``(n, J, d, d)`` blocks at the same positions as ``rhs``.
    ``margins`` defaults to the sup norms of the supplied blocks. The certified window
    keeps depths whose series tails are both <= ``tol``; ``need`` (inclusive depths)
    must fit inside it.
    """
    lam_S = np.asarray(lam_S, float)
    lam_U = np.asarray(lam_U, float)
    lS, lU = margins if margins is not None else block_margins(lam_S, lam_U)
    if not (lS < 1 and lU < 1):
        raise NonHyperbolicError(f"margins lam_S={lS:.4g}, lam_U={lU:.4g} are not both < 1")
    norm_S = np.linalg.norm(rhs.stable, axis=-1).max(initial=0.0)
    norm_U = np.linalg.norm(rhs.unstable, axis=-1).max(initial=0.0)
    NS = tail_terms(lS, norm_S, tol)
    NU = tail_terms(lU, norm_U, tol)
    J = rhs.n_depth
    uS = stable_sweep(lam_S, rhs.stable) if rhs.stable.shape[-1] else np.zeros(rhs.stable.shape)
    uU = unstable_sweep(lam_U, rhs.unstable) if rhs.unstable.shape[-1] else np.zeros(rhs.unstable.shape)
    # u_S at position p sums p terms; u_U at position p sums J - p terms
    lo_pos, hi_pos = NS + 1, J - NU - 1
    first = rhs.first_depth
    valid = (first + lo_pos, first + hi_pos)
    if need is not None and not (valid[0] <= need[0] and need[1] <= valid[1]):
        raise CertificationError(
            f"orbit window too short: certified depths {valid} do not cover {need} "
            f"(need {NS + 1} backward and {NU + 1} forward terms)")
    if lo_pos > hi_pos:
        raise CertificationError("orbit window too short for the requested tolerance")
    mask = np.zeros(J, bool)
    mask[lo_pos:hi_pos + 1] = True
    uS = np.where(mask[None, :, None], uS, np.nan)
    uU = np.where(mask[None, :, None], uU, np.nan)
    return CohomologicalSolution(uS, uU, first, valid, float(_series_tail(lS, norm_S, NS)),
                                 float(_series_tail(lU, norm_U, NU)), (NS, NU))


def matrix_sweep_SU(lam_S, lam_U, E):
    """Q_{j+1} = (Lam^S_j Q_j + E_j) (Lam^U_j)^{-1} from Q = 0 at position 0."""
    n, J, a, b = E.shape
    q = np.zeros((n, J, a, b))
    inv_U = np.linalg.inv(lam_U)
    for j in range(J - 1):
        q[:, j + 1] = (lam_S[:, j] @ q[:, j] + E[:, j]) @ inv_U[:, j]
    return q


def matrix_sweep_US(lam_S, lam_U, E):
    """Q_j = (Lam^U_j)^{-1} (Q_{j+1} Lam^S_j - E_j) from Q = 0 past the last position."""
    n, J, a, b = E.shape
    q = np.zeros((n, J + 1, a, b))
    inv_U = np.linalg.inv(lam_U)
    for j in range(J - 1, -1, -1):
        q[:, j] = inv_U[:, j] @ (q[:, j + 1] @ lam_S[:, j] - E[:, j])
    return q[:, :J]


# ------------------------------------------------------------------ orbit windows

@dataclass(eq=False)
class OrbitWindow:
    """Orbits through ``theta`` (n, m) on realizations ``ridx`` at depths ``lo..hi``.

    ``start`` is the noise-node index of depth 0; one depth is one time unit.
    """

    theta: np.ndarray
    zeta: np.ndarray
    ridx: np.ndarray
    start: np.ndarray
    spu: int
    lo: int
    hi: int
    rotation: np.ndarray

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @property
    def depths(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    @property
    def J(self) -> int:
        return self.hi - self.lo + 1

    def points(self, extra: int = 0) -> np.ndarray:
        d = np.arange(self.lo, self.hi + 1 + extra)
        return np.mod(self.theta[:, None, :] + d[None, :, None] * self.rotation, 1.0)

    def node_starts(self) -> np.ndarray:
        return self.start[:, None] + self.depths[None, :] * self.spu


def _eval_orbit(t: FourierTorus, pts, matrix=False):
    n, J, m = pts.shape
    flat = pts.reshape(-1, m)
    v = synthesize_matrix(t, flat) if matrix else synthesize(t, flat)
    return v.reshape((n, J) + v.shape[1:])


@dataclass(eq=False)
class OrbitFrame:
    """Deterministic data K0, P0, P0^{-1}(next), Lam0 blocks sampled along a window."""

    K0: np.ndarray
    P: np.ndarray
    Pinv_next: np.ndarray
    lam_S: np.ndarray
    lam_U: np.ndarray
    d_S: int

    @classmethod
    def build(cls, window: OrbitWindow, K0: FourierTorus, frame) -> "OrbitFrame":
        pts = window.points(extra=1)
        P_all = _eval_orbit(frame.P0, pts, matrix=True)
        lam = _eval_orbit(frame.Lambda0, pts[:, :-1], matrix=True)
        s = frame.d_S
        return cls(_eval_orbit(K0, pts[:, :-1]), P_all[:, :-1], np.linalg.inv(P_all[:, 1:]),
                   lam[..., :s, :s], lam[..., s:, s:], s)


@dataclass(eq=False)
class OrbitExpansion:
    """K_0..K_l along a window; entries outside ``valid[k]`` are NaN."""

    window: OrbitWindow
    frame: OrbitFrame
    K: list = field(default_factory=list)          # each (n, J, 2d)
    valid: list = field(default_factory=list)      # inclusive depth ranges
    R: list = field(default_factory=list)          # R_{k-1}, (n, J, 2d)
    tails: list = field(default_factory=list)      # (tail_S, tail_U) per order
    n_terms: list = field(default_factory=list)

    def at(self, k: int, depth: int) -> np.ndarray:
        lo, hi = self.valid[k]
        if not lo <= depth <= hi:
            raise CertificationError(f"K_{k} not certified at depth {depth} (window {self.valid[k]})")
        return self.K[k][:, depth - self.window.lo]

    def truncation(self, eps: float, depth: int, order: int | None = None) -> np.ndarray:
        order = len(self.K) - 1 if order is None else order
        return sum(eps**k * self.at(k, depth) for k in range(order + 1))


def window_depths(order: int, margins, need=(0, 1), tol=1e-6, r_est=4.0, N_max=60, extra=0):
    """Orbit window ``(lo, hi)`` so that order-``order`` coefficients are certified on ``need``."""
    lS, lU = margins
    NS = min(tail_terms(lS, r_est, tol), N_max) + 1 + extra
    NU = min(tail_terms(lU, r_est, tol), N_max) + 1 + extra
    return need[0] - order * NS, need[1] + order * NU


def make_window(theta, omegas, p: ModelParams, lo: int, hi: int, offsets=None) -> OrbitWindow:
    """Window over a list of realizations; orbit i uses ``omegas[ridx]`` given as (theta_i, r_i)."""
    theta = np.atleast_2d(np.asarray(theta, float))
    zeta, origin = flow.stack_zeta(omegas)
    first = omegas if isinstance(omegas, NoiseRealization) else omegas[0]
    spu = first.steps_per_unit
    n = theta.shape[0]
    ridx = np.zeros(n, np.int64) if offsets is None else np.asarray(offsets[0], np.int64)
    shift = np.zeros(n, np.int64) if offsets is None else np.asarray(offsets[1], np.int64)
    start = origin + shift * spu
    if (start + lo * spu < 0).any() or (start + (hi + 1) * spu >= zeta.shape[1]).any():
        raise DependencyError(
            f"noise horizon [{first.t_min}, {first.t_max}] does not cover orbit depths [{lo}, {hi + 1}]")
    return OrbitWindow(theta, zeta, ridx, start, spu, lo, hi, p.rotation)


def expand_orbits(window: OrbitWindow, K0: FourierTorus, frame, p: ModelParams, order: int, *,
                  tol: float = 1e-6, need=(0, 1), n_sub: int = 1, backend=None) -> OrbitExpansion:
    """K_1..K_order along the window via remainders R_{k-1} and cohomological solves."""
    if not frame.certified:
        raise NonHyperbolicError("frame is not certified; refusing to expand")
    of = OrbitFrame.build(window, K0, frame)
    ex = OrbitExpansion(window, of)
    n, J = window.n, window.J
    n2 = 2 * p.d
    ex.K.append(of.K0)
    ex.valid.append((window.lo, window.hi))
    starts = window.node_starts()
    pts = window.points()
    for k in range(1, order + 1):
        lo, hi = ex.valid[k - 1]
        sl = slice(lo - window.lo, hi - window.lo + 1)
        Js = hi - lo + 1
        jets = np.zeros((n, Js, k + 1, n2))
        for j in range(k):
            jets[:, :, j] = ex.K[j][:, sl]
        z, _, _ = flow.propagate(
            p, jets.reshape(-1, k + 1, n2), pts[:, sl].reshape(-1, p.m), window.zeta,
            np.repeat(window.ridx, Js), starts[:, sl].ravel(), spu=window.spu, n_sub=n_sub,
            backend=backend)
        R = z[:, k].reshape(n, Js, n2)
        Rt = np.einsum("njab,njb->nja", of.Pinv_next[:, sl], R)
        rhs = CohomologicalRHS(Rt[..., :of.d_S], Rt[..., of.d_S:], first_depth=lo)
        sol = cohomological_solve(of.lam_S[:, sl], of.lam_U[:, sl], rhs, tol=tol,
                                  margins=frame.margins)
        vlo, vhi = sol.valid
        if vlo > need[0] or vhi < need[1]:
            raise CertificationError(
                f"K_{k}: certified depths {sol.valid} do not cover {need}; widen the orbit window")
        Kt = np.concatenate([sol.stable, sol.unstable], axis=-1)
        Kk = np.full((n, J, n2), np.nan)
        Kk[:, sl] = np.einsum("njab,njb->nja", of.P[:, sl], Kt)
        Rfull = np.full((n, J, n2), np.nan)
        Rfull[:, sl] = R
        ex.K.append(Kk)
        ex.valid.append(sol.valid)
        ex.R.append(Rfull)
        ex.tails.append((sol.tail_S, sol.tail_U))
        ex.n_terms.append(sol.n_terms)
    return ex


def kk_residual(ex: OrbitExpansion, k: int, p: ModelParams, depth: int = 0, *, n_sub=1, backend=None):
    """|M0(theta) K_k(theta, omega) - K_k(T(theta, omega)) + R_{k-1}(theta, omega)| per orbit."""
    w = ex.window
    i = depth - w.lo
    z, M, _ = flow.propagate(p, ex.K[0][:, i, None, :], w.points()[:, i], w.zeta, w.ridx,
                             w.node_starts()[:, i], spu=w.spu, n_sub=n_sub, matrix_order=0,
                             backend=backend)
    lhs = np.einsum("nab,nb->na", M[:, 0], ex.at(k, depth)) - ex.at(k, depth + 1) + ex.R[k - 1][:, i]
    return np.linalg.norm(lhs, axis=-1)


# ------------------------------------------------------------------ public per-realization API

def orbit_noise(seed: int, lo: int, hi: int, d: int, h: float = flow.DEFAULT_H) -> NoiseRealization:
    """Realization whose support covers orbit depths ``lo..hi`` plus one unit."""
    return sample_path(seed, h, min(lo, 0) - 1, max(hi, 0) + 2, d)


def compute_Kk(k: int, K0: FourierTorus, frame, p: ModelParams, omega: NoiseRealization,
               theta=None, *, grid: TorusGrid | None = None, modes=None, tol: float = 1e-6,
               N_max: int = 60, n_sub: int = 1, backend=None):
    """K_k(., omega) at depth 0.

    With ``theta`` given returns values ``(n, 2d)``; otherwise samples a grid and returns a
    FourierTorus with ``modes`` (default: K0's).
    """
    as_torus = theta is None
    if as_torus:
        modes = K0.modes if modes is None else tuple(modes)
        grid = grid or TorusGrid.for_modes(modes)
        theta = grid.nodes()
    theta = np.atleast_2d(theta)
    lo, hi = window_depths(k, frame.margins, need=(0, 1), tol=tol, N_max=N_max)
    if omega.t_min > lo or omega.t_max < hi + 1:
        raise DependencyError(
            f"noise horizon [{omega.t_min}, {omega.t_max}] too short for depths [{lo}, {hi + 1}]")
    ex = _expand_with_retry(theta, [omega], None, K0, frame, p, k, lo, hi, tol, n_sub, backend)
    vals = ex.at(k, 0)
    if not as_torus:
        return vals
    return analyze(vals.reshape(grid.shape + (-1,)), modes, grid)


def _expand_with_retry(theta, omegas, offsets, K0, frame, p, order, lo, hi, tol, n_sub, backend,
                       need=(0, 1), max_raise=3):
    for attempt in range(max_raise + 1):
        w = make_window(theta, omegas, p, lo, hi, offsets)
        try:
            return expand_orbits(w, K0, frame, p, order, tol=tol, need=need, n_sub=n_sub,
                                 backend=backend)
        except CertificationError as exc:
            if attempt == max_raise or "window" not in str(exc):
                raise
            grow = max(4, (hi - lo) // 2)
            lo, hi = lo - grow // 2, hi + grow
    raise AssertionError("unreachable")


@dataclass(frozen=True, eq=False)
class FirstOrderFrame:
    """Q1 and Lam1 along orbits, both in frame coordinates, plus the E matrix."""

    Q1: np.ndarray        # (n, J, 2d, 2d), NaN outside ``valid``
    Lambda1: np.ndarray   # (n, J, 2d, 2d), exactly block diagonal
    E: np.ndarray         # (n, J, 2d, 2d)
    first_depth: int
    valid: tuple[int, int]
    tails: tuple[float, float]

    def at(self, name: str, depth: int) -> np.ndarray:
        arr = getattr(self, name)
        if name == "Q1" and not self.valid[0] <= depth <= self.valid[1]:
            raise CertificationError(f"Q1 not certified at depth {depth}")
        return arr[:, depth - self.first_depth]


def lambda_need(frame, tol: float = 1e-6, r_est: float = 4.0) -> tuple[int, int]:
    """Depths on which K_1 must be certified so that Q1 is certified at depths 0 and 1."""
    lS, lU = frame.margins
    nq = tail_terms(lS * lU, r_est, tol) + 2
    return -nq, 1 + nq


def frame_matrices_E(ex: OrbitExpansion, p: ModelParams, *, n_sub=1, backend=None):
    """E = P0^{-1}(next) (D_z^2 F K_1 + D_eps D_z F) P0 on the depths where K_1 is certified."""
    w = ex.window
    lo, hi = ex.valid[1]
    sl = slice(lo - w.lo, hi - w.lo + 1)
    n, n2 = w.n, 2 * p.d
    Js = hi - lo + 1
    jets = np.stack([ex.K[0][:, sl], ex.K[1][:, sl]], axis=2)
    _, M, _ = flow.propagate(p, jets.reshape(-1, 2, n2), w.points()[:, sl].reshape(-1, p.m),
                             w.zeta, np.repeat(w.ridx, Js), w.node_starts()[:, sl].ravel(),
                             spu=w.spu, n_sub=n_sub, matrix_order=1, backend=backend)
    M0 = M[:, 0].reshape(n, Js, n2, n2)
    M1 = M[:, 1].reshape(n, Js, n2, n2)
    f = ex.frame
    E = f.Pinv_next[:, sl] @ M1 @ f.P[:, sl]
    return E, M0, (lo, hi)


def lambda_first_order(ex: OrbitExpansion, frame, p: ModelParams, *, tol: float = 1e-6,
                       n_sub: int = 1, backend=None) -> FirstOrderFrame:
    """Solve the SU / US block equations for Q1 (SS = UU = 0) and read off Lam1."""
    if len(ex.K) < 2:
        raise DependencyError("Lambda_1 needs K_1 along the orbit")
    if not frame.certified:
        raise NonHyperbolicError("frame is not certified")
    E, _, (lo, hi) = frame_matrices_E(ex, p, n_sub=n_sub, backend=backend)
    w = ex.window
    sl = slice(lo - w.lo, hi - w.lo + 1)
    s = ex.frame.d_S
    lam_S, lam_U = ex.frame.lam_S[:, sl], ex.frame.lam_U[:, sl]
    qSU = matrix_sweep_SU(lam_S, lam_U, E[..., :s, s:])
    qUS = matrix_sweep_US(lam_S, lam_U, E[..., s:, :s])
    lS, lU = frame.margins
    rate = lS * lU
    nSU = np.abs(E[..., :s, s:]).max(initial=0.0) * max(1, s)
    nUS = np.abs(E[..., s:, :s]).max(initial=0.0) * max(1, s)
    NSU, NUS = tail_terms(rate, nSU, tol), tail_terms(rate, nUS, tol)
    J = hi - lo + 1
    vlo, vhi = lo + NSU + 1, hi - NUS - 1
    if vlo > vhi:
        raise CertificationError("orbit window too short for the Q1 series")
    n, n2 = w.n, 2 * p.d
    Q = np.zeros((n, J, n2, n2))
    Q[..., :s, s:] = qSU
    Q[..., s:, :s] = qUS
    mask = np.zeros(J, bool)
    mask[vlo - lo:vhi - lo + 1] = True
    Q = np.where(mask[None, :, None, None], Q, np.nan)
    L1 = np.zeros_like(E)
    L1[..., :s, :s] = E[..., :s, :s]
    L1[..., s:, s:] = E[..., s:, s:]
    return FirstOrderFrame(Q, L1, E, lo, (vlo, vhi),
                           (float(_series_tail(rate, nSU, NSU)), float(_series_tail(rate, nUS, NUS))))


def reducibility_residual(fo: FirstOrderFrame, ex: OrbitExpansion, depth: int = 0) -> np.ndarray:
    """|Lam0 Q1 - (Q1 o T) Lam0 - Lam1 + E| per orbit at ``depth`` (max entry)."""
    f = ex.frame
    i = depth - ex.window.lo
    s = f.d_S
    n2 = f.P.shape[-1]
    lam = np.zeros((ex.window.n, n2, n2))
    lam[:, :s, :s] = f.lam_S[:, i]
    lam[:, s:, s:] = f.lam_U[:, i]
    q0, q1 = fo.at("Q1", depth), fo.at("Q1", depth + 1)
    res = lam @ q0 - q1 @ lam - fo.at("Lambda1", depth) + fo.at("E", depth)
    return np.abs(res).max(axis=(-2, -1))


@dataclass(eq=False)
class ExpansionBundle:
    """Order-l expansion for one realization, sampled on a torus grid."""

    seed: int | None
    horizon: tuple[float, float]
    order: int
    K: list                          # FourierTorus K_0..K_l
    Lambda0: FourierTorus
    Lambda1: FourierTorus | None
    N_max: int
    tails: list
    residuals: list


def build_bundle(K0: FourierTorus, frame, p: ModelParams, omega: NoiseRealization, order: int, *,
                 tol: float = 1e-6, N_max: int = 60, n_sub: int = 1, grid=None,
                 with_lambda: bool = True, backend=None) -> ExpansionBundle:
    modes = K0.modes
    grid = grid or TorusGrid.for_modes(modes)
    theta = grid.nodes()
    need = lambda_need(frame, tol) if with_lambda else (0, 1)
    lo, hi = window_depths(order, frame.margins, need=need, tol=tol, N_max=N_max)
    if omega.t_min > lo or omega.t_max < hi + 1:
        raise DependencyError(
            f"noise horizon [{omega.t_min}, {omega.t_max}] too short for depths [{lo}, {hi + 1}]")
    ex = _expand_with_retry(theta, [omega], None, K0, frame, p, order, lo, hi, tol, n_sub, backend,
                            need=need, max_raise=0)
    K = [K0]
    res = []
    for k in range(1, order + 1):
        K.append(analyze(ex.at(k, 0).reshape(grid.shape + (-1,)), modes, grid))
        res.append(float(kk_residual(ex, k, p, n_sub=n_sub, backend=backend).max()))
    L1 = None
    if with_lambda and order >= 1:
        fo = lambda_first_order(ex, frame, p, tol=tol, n_sub=n_sub, backend=backend)
        L1 = analyze(fo.at("Lambda1", 0).reshape(grid.shape + (-1,)), modes, grid)
    return ExpansionBundle(omega.seed, (omega.t_min, omega.t_max), order, K, frame.Lambda0, L1,
                           N_max, ex.tails, res)


# ------------------------------------------------------------------ defect scaling

def expansion_defect(ex: OrbitExpansion, p: ModelParams, eps_grid, order: int | None = None, *,
                     n_sub: int = 1, backend=None):
    """Invariance defect of sum_{k<=order} eps^k K_k at depth 0 for each eps.

    Returns ``(defects, slope)`` where ``defects[i]`` is the per-orbit defect array at
    ``eps_grid[i]`` and ``slope`` the least-squares log-log slope of the orbit-mean defect
    over the positive entries of ``eps_grid``.
    """
    order = len(ex.K) - 1 if order is None else order
    w = ex.window
    i = -w.lo
    out = []
    for eps in eps_grid:
        z0 = ex.truncation(eps, 0, order)
        z1, _, _ = flow.propagate(p, z0[:, None, :], w.points()[:, i], w.zeta, w.ridx,
                                  w.node_starts()[:, i], spu=w.spu, eps=eps, n_sub=n_sub,
                                  backend=backend)
        out.append(np.linalg.norm(z1[:, 0] - ex.truncation(eps, 1, order), axis=-1))
    out = np.array(out)
    eps_arr = np.asarray(eps_grid, float)
    pos = eps_arr > 0
    slope = float("nan")
    if pos.sum() >= 2:
        slope = float(np.polyfit(np.log(eps_arr[pos]), np.log(out[pos].mean(axis=1)), 1)[0])
    return out, slope


def ensemble_window(theta, seed: int, n_samples: int, p: ModelParams, lo: int, hi: int, *,
                    h: float = flow.DEFAULT_H, first: int = 0):
    """Windows for ``n_samples`` counter-seeded realizations, each with every probe theta."""
    theta = np.atleast_2d(np.asarray(theta, float))
    seeds = [realization_seed(seed, i) for i in range(first, first + n_samples)]
    omegas = [orbit_noise(s, lo, hi, p.d, h) for s in seeds]
    n_p = theta.shape[0]
    th = np.tile(theta, (n_samples, 1))
    ridx = np.repeat(np.arange(n_samples), n_p)
    return make_window(th, omegas, p, lo, hi, offsets=(ridx, np.zeros_like(ridx))), seeds
