"""Ensemble statistics of the random torus, Lyapunov exponents and exit diagnostics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import flow, perturbation as pt
from .errors import CertificationError, ConfigError, NhtoriError
from .model import ModelParams, drift
from .noise import NoiseRealization, realization_seed, sample_path


# ------------------------------------------------------------------ moments

def skew_se(n: int) -> float:
    return float(np.sqrt(6.0 * n * (n - 1) / ((n - 2) * (n + 1) * (n + 3))))


def kurtosis_se(n: int) -> float:
    return float(2 * skew_se(n) * np.sqrt((n * n - 1.0) / ((n - 3) * (n + 5))))


@dataclass(frozen=True, eq=False)
class EnsembleSummary:
    n_samples: int
    theta: np.ndarray      # (P, m)
    mean: np.ndarray       # (P, C)
    var: np.ndarray
    skew: np.ndarray
    kurtosis: np.ndarray   # excess
    se_mean: np.ndarray
    se_var: np.ndarray
    se_skew: float
    se_kurtosis: float
    n_failed: int = 0
    seeds: tuple = ()

    @classmethod
    def from_samples(cls, samples, theta, n_failed=0, seeds=()) -> "EnsembleSummary":
        x = np.asarray(samples, float)   # (n, P, C)
        n = x.shape[0]
        if n < 4:
            raise ValueError("need at least 4 samples for moment standard errors")
        mean = x.mean(axis=0)
        const = np.ptp(x, axis=0) == 0
        var = np.where(const, 0.0, x.var(axis=0, ddof=1))
        # constant columns get a dummy ramp so scipy does not warn; their moments are 0
        xs = np.where(const[None], np.arange(n, dtype=float).reshape((n,) + (1,) * (x.ndim - 1)), x)
        sk = np.where(const, 0.0, sps.skew(xs, axis=0, bias=False))
        ku = np.where(const, 0.0, sps.kurtosis(xs, axis=0, bias=False))
        return cls(n, np.atleast_2d(theta), mean, var, sk, ku, np.sqrt(var / n),
                   var * np.sqrt(2.0 / (n - 1)), skew_se(n), kurtosis_se(n), n_failed, tuple(seeds))

    def theta_averaged(self) -> dict:
        return {"mean": self.mean.mean(axis=0), "var": self.var.mean(axis=0),
                "skew": self.skew.mean(axis=0), "kurtosis": self.kurtosis.mean(axis=0)}

    def rows(self):
        """(theta, component, mean, var, skew, kurtosis) rows for CSV output."""
        for i, th in enumerate(self.theta):
            for c in range(self.mean.shape[1]):
                yield (th, c, self.mean[i, c], self.var[i, c], self.skew[i, c], self.kurtosis[i, c])


def probe_thetas(m: int, per_axis: int = 16) -> np.ndarray:
    axes = [np.arange(per_axis) / per_axis] * m
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in mesh], axis=-1)


def expansion_samples(det, p: ModelParams, order: int, theta, n_samples: int, seed: int, *,
                      tol: float = 1e-6, N_max: int = 60, h: float = flow.DEFAULT_H,
                      n_sub: int = 1, chunk: int = 500, first: int = 0, need=(0, 1),
                      backend=None):
    """K_0..K_order at depth 0 for counter-seeded realizations ``first..first+n_samples-1``.

    Returns ``(K, failed, seeds)`` with ``K`` of shape ``(n_ok, order+1, P, 2d)``.
    Chunks that fail are retried sample by sample; individual failures are counted.
    """
    theta = np.atleast_2d(np.asarray(theta, float))
    frame = det.frame
    lo, hi = pt.window_depths(order, frame.margins, need=need, tol=tol, N_max=N_max)
    out, seeds, failed = [], [], 0
    P = theta.shape[0]

    def run(first_i, n):
        w, s = pt.ensemble_window(theta, seed, n, p, lo, hi, h=h, first=first_i)
        ex = pt.expand_orbits(w, det.K0, frame, p, order, tol=tol, need=need, n_sub=n_sub,
                              backend=backend)
        K = np.stack([ex.at(k, 0) for k in range(order + 1)], axis=1)
        return K.reshape(n, P, order + 1, -1).transpose(0, 2, 1, 3), s

    for c0 in range(first, first + n_samples, chunk):
        n = min(chunk, first + n_samples - c0)
        try:
            K, s = run(c0, n)
            out.append(K)
            seeds.extend(s)
        except NhtoriError:
            for i in range(c0, c0 + n):
                try:
                    K, s = run(i, 1)
                    out.append(K)
                    seeds.extend(s)
                except NhtoriError:
                    failed += 1
    K = np.concatenate(out, axis=0) if out else np.zeros((0, order + 1, P, 2 * p.d))
    return K, failed, seeds


def mc_torus_moments(det, p: ModelParams, order: int, eps: float, theta=None, n_samples: int = 1000,
                     seed: int = 0, **kw) -> EnsembleSummary:
    """Moments of sum_{k<=order} eps^k K_k(theta, omega) over realizations."""
    theta = probe_thetas(p.m) if theta is None else np.atleast_2d(theta)
    K, failed, seeds = expansion_samples(det, p, order, theta, n_samples, seed, **kw)
    if failed > 0.01 * n_samples:
        raise CertificationError(f"{failed} of {n_samples} samples failed (limit 1%)")
    w = eps ** np.arange(order + 1)
    vals = np.einsum("k,nkpc->npc", w, K)
    return EnsembleSummary.from_samples(vals, theta, failed, seeds)


# ------------------------------------------------------------------ Lyapunov exponents

@dataclass(frozen=True, eq=False)
class LyapunovReport:
    eps: float
    n_steps: int
    warmup: int
    n_samples: int
    base: np.ndarray            # theta-averaged log moduli of Lam0 along the orbit, descending
    correction: np.ndarray      # eps * <Lam1 / Lam0>
    direct_mean: np.ndarray
    direct_se: np.ndarray
    pert_mean: np.ndarray
    pert_se: np.ndarray
    d_S: int
    per_sample: np.ndarray = field(repr=False, default=None)

    def rows(self):
        for i in range(len(self.direct_mean)):
            yield (i + 1, self.base[i], self.correction[i], self.pert_mean[i], self.pert_se[i],
                   self.direct_mean[i], self.direct_se[i])


def qr_exponents(mats) -> np.ndarray:
    """Average log of the R-diagonal over a sequence of matrices (n, N, k, k), unsorted."""
    n, N, k, _ = mats.shape
    Q = np.broadcast_to(np.eye(k), (n, k, k)).copy()
    acc = np.zeros((n, k))
    for j in range(N):
        Q, R = np.linalg.qr(mats[:, j] @ Q)
        acc += np.log(np.abs(np.diagonal(R, axis1=-2, axis2=-1)))
    return acc / N


def _warm_qr(mats, warmup):
    n, N, k, _ = mats.shape
    Q = np.broadcast_to(np.eye(k), (n, k, k)).copy()
    for j in range(warmup):
        Q, _ = np.linalg.qr(mats[:, j] @ Q)
    acc = np.zeros((n, k))
    for j in range(warmup, N):
        Q, R = np.linalg.qr(mats[:, j] @ Q)
        acc += np.log(np.abs(np.diagonal(R, axis1=-2, axis2=-1)))
    return acc / (N - warmup)


def _block_exponents(blocks, warmup, linear=None):
    """Exponents of a block cocycle; ``linear`` (Lam1 blocks, eps) adds the first-order term."""
    n, N, k, _ = blocks.shape
    if k == 1:
        base = np.log(np.abs(blocks[:, warmup:, 0, 0])).mean(axis=1)[:, None]
        if linear is None:
            return base
        L1, eps = linear
        return base + eps * (L1[:, warmup:, 0, 0] / blocks[:, warmup:, 0, 0]).mean(axis=1)[:, None]
    if linear is not None:
        L1, eps = linear
        blocks = blocks + eps * L1
    return np.sort(_warm_qr(blocks, warmup), axis=1)[:, ::-1]


def lyapunov_spectrum(det, p: ModelParams, eps: float, n_steps: int = 200, n_samples: int = 20,
                      seed: int = 0, *, warmup: int = 20, theta0=None, tol: float = 1e-6,
                      N_max: int = 60, h: float = flow.DEFAULT_H, n_sub: int = 1,
                      perturbative: bool = True, first: int = 0, backend=None) -> LyapunovReport:
    """Direct QR-cocycle exponents along K_eps = K0 + eps K1 plus the perturbative Lam column.

    The cocycle is M(T^j) = D_z F(K_eps(T^j), T^j, eps) evaluated on the torus itself, so the
    orbit never drifts off the saddle. ``warmup`` steps align the QR frame before averaging.
    """
    if n_steps < 50:
        raise ConfigError(f"n_steps={n_steps} < 50: Lyapunov averages would be unconverged")
    frame = det.frame
    theta0 = np.zeros((1, p.m)) if theta0 is None else np.atleast_2d(theta0)
    total = warmup + n_steps
    order = 1 if (eps > 0 or perturbative) else 0
    need = (0, total)
    lo, hi = pt.window_depths(order, frame.margins, need=need, tol=tol, N_max=N_max)
    w, seeds = pt.ensemble_window(theta0, seed, n_samples, p, lo, hi, h=h, first=first)
    ex = pt.expand_orbits(w, det.K0, frame, p, order, tol=tol, need=need, n_sub=n_sub,
                          backend=backend)
    n, n2 = w.n, 2 * p.d
    depths = np.arange(0, total)
    idx = depths - w.lo
    Kd = np.stack([ex.truncation(eps, int(j), order) for j in depths], axis=1)
    _, M, _ = flow.propagate(p, Kd.reshape(-1, 1, n2), w.points()[:, idx].reshape(-1, p.m), w.zeta,
                             np.repeat(w.ridx, total), w.node_starts()[:, idx].ravel(), spu=w.spu,
                             eps=eps, n_sub=n_sub, matrix_order=0, backend=backend)
    M = M[:, 0].reshape(n, total, n2, n2)
    direct = np.sort(_warm_qr(M, warmup), axis=1)[:, ::-1]
    s = frame.d_S
    of = ex.frame
    lamS, lamU = of.lam_S[:, idx], of.lam_U[:, idx]
    base = np.concatenate([_block_exponents(lamU, warmup), _block_exponents(lamS, warmup)], axis=1)
    if perturbative and order >= 1:
        E, _, (elo, ehi) = pt.frame_matrices_E(ex, p, n_sub=n_sub, backend=backend)
        if elo > 0 or ehi < total - 1:
            raise CertificationError("K1 not certified over the Lyapunov averaging window")
        eidx = depths - elo
        L1 = E[:, eidx]
        pert = np.concatenate([
            _block_exponents(lamU, warmup, (L1[..., s:, s:], eps)),
            _block_exponents(lamS, warmup, (L1[..., :s, :s], eps))], axis=1)
    else:
        pert = base.copy()
    se = lambda a: a.std(axis=0, ddof=1) / np.sqrt(a.shape[0]) if a.shape[0] > 1 else np.zeros(a.shape[1])
    return LyapunovReport(eps, n_steps, warmup, n_samples, base.mean(axis=0),
                          (pert - base).mean(axis=0), direct.mean(axis=0), se(direct),
                          pert.mean(axis=0), se(pert), s, direct)


# ------------------------------------------------------------------ SDE coordinates

def pullback_to_sde(K_values, omega: NoiseRealization, eps: float, t: float = 0.0) -> np.ndarray:
    """K_hat = K_eps + eps zeta(Phi_t omega): the torus in the original Langevin coordinates."""
    return np.asarray(K_values, float) + eps * omega.zeta(t)


def pushforward_to_rde(K_values, omega: NoiseRealization, eps: float, t: float = 0.0) -> np.ndarray:
    return np.asarray(K_values, float) - eps * omega.zeta(t)


# ------------------------------------------------------------------ exit probabilities

@dataclass(frozen=True)
class ExitRow:
    n: float
    p_hat: float
    ci_low: float
    ci_high: float
    exits: int
    samples: int


def _ball_points(rng, R, n_ic, dim):
    """Half on the sphere |z| = R, half uniform inside the ball."""
    g = rng.standard_normal((n_ic, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = np.full(n_ic, float(R))
    inner = n_ic // 2
    r[inner:] = R * rng.random(n_ic - inner) ** (1.0 / dim)
    return g * r[:, None]


def exit_probability(p: ModelParams, n_grid, R: float = 1.0, T: float = 10.0,
                     n_samples: int = 10_000, eps: float = 0.1, seed: int = 0, *,
                     h: float = flow.DEFAULT_H, n_ic: int = 8, chunk: int = 2000,
                     confidence: float = 0.95) -> list[ExitRow]:
    """Monte Carlo P[ sup_{|z0| <= R} sup_{t <= T} |z_t(z0)| >= n ] for the uncut SDE.

    Each noise sample drives ``n_ic`` initial conditions (half on the sphere |z0| = R) from a
    uniform random phase; the sup over z0 is taken over that set. Euler-Maruyama with step h;
    non-finite states count as exits.
    """
    n_grid = np.asarray(n_grid, float)
    dim = 2 * p.d
    n_steps = int(round(T / h))
    sup = np.empty(n_samples)
    for c0 in range(0, n_samples, chunk):
        nb = min(chunk, n_samples - c0)
        rng = np.random.default_rng(realization_seed(seed, c0 // chunk))
        z = np.concatenate([_ball_points(rng, R, n_ic, dim) for _ in range(nb)])
        theta = np.repeat(rng.random((nb, p.m)), n_ic, axis=0)
        zmax = np.linalg.norm(z, axis=1)
        alive = np.ones(len(z), bool)
        sq = np.sqrt(h)
        for j in range(n_steps):
            dW = np.repeat(rng.standard_normal((nb, p.d)) * sq, n_ic, axis=0)
            with np.errstate(over="ignore", invalid="ignore"):
                z = z + h * drift(z, theta + p.rotation * (j * h), p)
                z[:, p.d:] += eps * dW
                nrm = np.linalg.norm(z, axis=1)
            nrm = np.where(np.isfinite(nrm), nrm, np.inf)
            zmax = np.maximum(zmax, np.where(alive, nrm, zmax))
            alive &= np.isfinite(nrm) & (nrm < 1e8)
            z = np.where(alive[:, None], z, 0.0)
        sup[c0:c0 + nb] = zmax.reshape(nb, n_ic).max(axis=1)
    rows = []
    for n in n_grid:
        k = int((sup >= n).sum())
        ci = sps.binomtest(k, n_samples).proportion_ci(confidence_level=confidence, method="wilson")
        rows.append(ExitRow(float(n), k / n_samples, float(ci.low), float(ci.high), k, n_samples))
    return rows


def monotone_up_to_ci(rows: list[ExitRow]) -> bool:
    """Non-increasing in n up to overlap of Wilson intervals."""
    return all(b.ci_low <= a.ci_high for a, b in zip(rows, rows[1:]))


# ------------------------------------------------------------------ ergodicity

@dataclass(frozen=True)
class ErgodicResult:
    orbit_mean: float
    product_mean: float
    se: float
    deviation: float


def ergodic_average_test(g, p: ModelParams, n_orbit: int = 10_000, n_samples: int = 100,
                         seed: int = 0, *, n_product: int | None = None) -> ErgodicResult:
    """Orbit averages of g(theta_j, zeta_v(Phi_j omega)) vs. the product-measure average.

    The product average draws theta uniformly and zeta_v from its stationary law N(0, 1/2).
    ``deviation`` is the difference in units of the combined standard error.
    """
    orbit = np.empty(n_samples)
    for i in range(n_samples):
        rs = realization_seed(seed, i)
        om = sample_path(rs, 1.0, 0.0, float(n_orbit), p.d)
        theta0 = np.random.default_rng(rs).random(p.m)
        j = np.arange(n_orbit)
        th = np.mod(theta0 + j[:, None] * p.rotation, 1.0)
        orbit[i] = np.mean(g(th, om.zeta_v[om.origin:om.origin + n_orbit]))
    n_product = n_product or n_samples * n_orbit
    rng = np.random.default_rng(realization_seed(seed, n_samples + 1))
    th = rng.random((n_product, p.m))
    zv = rng.standard_normal((n_product, p.d)) * np.sqrt(0.5)
    gp = np.asarray(g(th, zv), float)
    om_mean, pr_mean = float(orbit.mean()), float(gp.mean())
    se = float(np.sqrt(orbit.var(ddof=1) / n_samples + gp.var(ddof=1) / n_product))
    diff = om_mean - pr_mean
    dev = 0.0 if diff == 0 else (diff / se if se > 0 else np.inf)
    return ErgodicResult(om_mean, pr_mean, se, float(dev))
