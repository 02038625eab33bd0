"""Discretized two-sided Brownian paths, the Wiener shift, and the stationary OU process.

A :class:`NoiseRealization` stores increments on a uniform grid together with
the OU samples zeta(Phi_t omega) at every node. Shifting a realization only moves
the index of t=0, so Phi_t Phi_s = Phi_{t+s} holds bit-for-bit.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

_U64 = (1 << 64) - 1


def realization_seed(seed: int, index: int) -> int:
    """Counter-based 64-bit key of realization ``index`` in an ensemble rooted at ``seed``."""
    ss = np.random.SeedSequence(int(seed) & _U64, spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def ou_step_gain(h: float) -> float:
    """Scale mapping a N(0, h) increment onto the exact OU innovation N(0, (1 - e^{-2h})/2)."""
    return float(np.sqrt(-np.expm1(-2 * h) / (2 * h)))


@dataclass(frozen=True, eq=False)
class NoiseRealization:
    seed: int | None
    h: float
    increments: np.ndarray  # (n, d); increments[i] = W(t_{i+1}) - W(t_i)
    zeta_v: np.ndarray      # (n + 1, d); velocity block of zeta at each node
    origin: int             # node index of t = 0

    def __post_init__(self):
        for name in ("increments", "zeta_v"):
            arr = getattr(self, name)
            if arr.flags.writeable:
                arr = arr.copy()
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        if not 0 <= self.origin <= self.increments.shape[0]:
            raise ValueError("origin outside the grid")

    @property
    def d(self) -> int:
        return self.increments.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.increments.shape[0] + 1

    @property
    def t_min(self) -> float:
        return -self.origin * self.h

    @property
    def t_max(self) -> float:
        return (self.n_nodes - 1 - self.origin) * self.h

    @property
    def steps_per_unit(self) -> int:
        k = int(round(1.0 / self.h))
        if abs(k * self.h - 1.0) > 1e-12:
            raise ValueError(f"noise step h={self.h} does not divide the unit time interval")
        return k

    def times(self) -> np.ndarray:
        return (np.arange(self.n_nodes) - self.origin) * self.h

    def index_of(self, t: float) -> int:
        k = t / self.h
        i = int(round(k))
        if abs(i - k) > 1e-9:
            raise ValueError(f"time {t} is not on the grid of step {self.h}")
        return self.origin + i

    def path(self) -> np.ndarray:
        """W at every node, anchored so that W(0) = 0 exactly."""
        w = np.zeros((self.n_nodes, self.d))
        o = self.origin
        w[o + 1:] = np.cumsum(self.increments[o:], axis=0)
        w[:o] = -np.cumsum(self.increments[:o][::-1], axis=0)[::-1]
        return w

    def W(self, t: float) -> np.ndarray:
        return self.path()[self.index_of(t)]

    def zeta(self, t: float = 0.0) -> np.ndarray:
        """zeta(Phi_t omega) in R^{2d}; the position block is identically zero."""
        return np.concatenate([np.zeros(self.d), self.zeta_v[self.index_of(t)]])

    def ou_samples(self) -> np.ndarray:
        return np.concatenate([np.zeros_like(self.zeta_v), self.zeta_v], axis=1)

    def scaled(self, c: float) -> "NoiseRealization":
        return NoiseRealization(self.seed, self.h, self.increments * c, self.zeta_v * c, self.origin)

    @classmethod
    def zeros(cls, h: float, t_min: float, t_max: float, d: int) -> "NoiseRealization":
        n_left, n_right = _grid_counts(h, t_min, t_max)
        n = n_left + n_right
        return cls(None, float(h), np.zeros((n, d)), np.zeros((n + 1, d)), n_left)


def _grid_counts(h, t_min, t_max):
    if not h > 0:
        raise ValueError(f"time step must be positive, got {h}")
    if t_min > 0 or t_max < 0:
        raise ValueError(f"support [{t_min}, {t_max}] must contain 0")
    n_left = int(np.ceil(-t_min / h - 1e-9))
    n_right = int(np.ceil(t_max / h - 1e-9))
    return n_left, n_right


def sample_path(seed: int, h: float, t_min: float, t_max: float, d: int) -> NoiseRealization:
    """Two-sided Brownian path on ``[t_min, t_max]`` with OU samples attached.

    Forward and backward increments come from separate substreams, so enlarging the
    support keeps the existing increments unchanged. zeta at ``t_min`` is drawn from
    the stationary law N(0, 1/2) on a third substream and advanced with the exact
    one-step OU law driven by the same increments.
    """
    n_left, n_right = _grid_counts(h, t_min, t_max)
    fwd, bwd, init = np.random.SeedSequence(int(seed) & _U64).spawn(3)
    sq = np.sqrt(h)
    right = np.random.default_rng(fwd).standard_normal((n_right, d)) * sq
    left = np.random.default_rng(bwd).standard_normal((n_left, d))[::-1] * sq
    inc = np.concatenate([left, right], axis=0)
    z0 = np.random.default_rng(init).standard_normal(d) * np.sqrt(0.5)
    zeta = ou_recursion(z0, inc, h)
    return NoiseRealization(int(seed), float(h), inc, zeta, n_left)


def ou_recursion(zeta0, increments, h):
    """zeta_{i+1} = e^{-h} zeta_i + gain * dW_i, starting from ``zeta0``."""
    decay = np.exp(-h)
    zeta0 = np.asarray(zeta0, float)
    out = np.empty((increments.shape[0] + 1, increments.shape[1]))
    out[0] = zeta0
    if increments.shape[0]:
        out[1:], _ = lfilter([ou_step_gain(h)], [1.0, -decay], increments, axis=0,
                             zi=(decay * zeta0)[None, :])
    return out


def sample_ensemble(seed: int, n: int, h: float, t_min: float, t_max: float, d: int,
                    start: int = 0) -> list[NoiseRealization]:
    return [sample_path(realization_seed(seed, i), h, t_min, t_max, d) for i in range(start, start + n)]


def wiener_shift(omega: NoiseRealization, s: float) -> NoiseRealization:
    """Phi_s omega: the path omega(s + .) - omega(s) on the shifted support."""
    k = s / omega.h
    i = int(round(k))
    if abs(i - k) > 1e-9:
        raise ValueError(f"shift {s} is not a multiple of h={omega.h}")
    origin = omega.origin + i
    if not 0 <= origin < omega.n_nodes:
        raise IndexError(f"shift {s} leaves the support [{omega.t_min}, {omega.t_max}]")
    return NoiseRealization(omega.seed, omega.h, omega.increments, omega.zeta_v, origin)


def ou_process(omega: NoiseRealization) -> np.ndarray:
    """zeta(Phi_{t_i} omega) at every grid node, shape ``(n_nodes, 2d)``."""
    return omega.ou_samples()


def ou_integral(omega: NoiseRealization, t: float = 0.0, horizon: float = 40.0) -> np.ndarray:
    """Trapezoid evaluation of zeta(Phi_t omega) = -int_{-inf}^0 e^s sigma (Phi_t omega)(s) ds.

    Independent of the recursion; used to validate it. Needs ``horizon`` time units of
    history before ``t``.
    """
    shifted = wiener_shift(omega, t)
    w = shifted.path()
    lo = shifted.index_of(-horizon)
    o = shifted.origin
    s = shifted.times()[lo:o + 1]
    vel = -np.trapezoid(np.exp(s)[:, None] * w[lo:o + 1], s, axis=0)
    return np.concatenate([np.zeros(omega.d), vel])


def random_transform(z, omega: NoiseRealization, eps: float, inverse: bool = False,
                     t: float = 0.0) -> np.ndarray:
    """T(z, Phi_t omega) = z - eps zeta, or its inverse z + eps zeta."""
    shift = eps * omega.zeta(t)
    z = np.asarray(z, float)
    return z + shift if inverse else z - shift


def write_path_csv(path, omega: NoiseRealization) -> None:
    d = omega.d
    w = omega.path()
    zeta = omega.ou_samples()
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t"] + [f"W_{i + 1}" for i in range(d)] + [f"zeta_{i + 1}" for i in range(2 * d)])
        for t, wi, zi in zip(omega.times(), w, zeta):
            out.writerow([repr(float(t))] + [repr(float(x)) for x in wi] + [repr(float(x)) for x in zi])
