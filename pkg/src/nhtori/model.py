"""Quasi-periodically forced double-well Langevin model.

State ``z = (x, v)`` in R^{2d}. The drift is ``A z + B(z, theta)`` with
``A = [[0, I], [I, -gamma I]]`` and ``B = (0, -E + delta (x - E)^3)``, so that
``dv/dt = -gamma v + (x - E) + delta (x - E)^3 = -gamma v - U'(x - E)`` with
``U(y) = -y^2/2 - delta y^4/4`` acting coordinatewise.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True, eq=False)
class ModelParams:
    d: int = 1
    m: int = 1
    gamma: float = 1.0
    delta: float = -1.0
    amp: np.ndarray = field(default_factory=lambda: np.zeros(1))
    alpha: np.ndarray = field(default_factory=lambda: np.array([np.pi * (np.sqrt(5.0) - 1.0)]))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(1))
    n_cut: float | None = None
    channel_map: np.ndarray | None = None

    def __post_init__(self):
        d, m = int(self.d), int(self.m)
        if d < 1 or m < 1:
            raise ConfigError("model.d and model.m must be positive")
        if not self.gamma > 0:
            raise ConfigError(f"model.gamma must be > 0, got {self.gamma}")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "m", m)
        for name in ("amp", "alpha", "beta"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), float)).copy()
            if arr.shape != (m,):
                raise ConfigError(f"model.{name} must have length m={m}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        cmap = np.ones((d, m)) if self.channel_map is None else np.asarray(self.channel_map, float)
        if cmap.shape != (d, m):
            raise ConfigError(f"model.channel_map must be {d}x{m}, got {cmap.shape}")
        cmap = cmap.copy()
        cmap.setflags(write=False)
        object.__setattr__(self, "channel_map", cmap)
        if self.n_cut is not None and not self.n_cut > 0:
            raise ConfigError("model.n_cut must be positive")
        _warn_resonance(self.rotation)

    @property
    def rotation(self) -> np.ndarray:
        """Rotation vector of the time-1 map in turns: alpha / (2 pi) mod 1."""
        return np.mod(self.alpha / (2 * np.pi), 1.0)

    def phase_at(self, t) -> np.ndarray:
        return np.mod((self.alpha * np.asarray(t, float)[..., None] + self.beta) / (2 * np.pi), 1.0)

    @property
    def A(self) -> np.ndarray:
        d = self.d
        eye = np.eye(d)
        return np.block([[np.zeros((d, d)), eye], [eye, -self.gamma * eye]])

    @property
    def sigma(self) -> np.ndarray:
        return np.vstack([np.zeros((self.d, self.d)), np.eye(self.d)])

    def replace(self, **changes) -> "ModelParams":
        kw = dict(d=self.d, m=self.m, gamma=self.gamma, delta=self.delta, amp=self.amp,
                  alpha=self.alpha, beta=self.beta, n_cut=self.n_cut, channel_map=self.channel_map)
        kw.update(changes)
        return ModelParams(**kw)


def _warn_resonance(rot, max_order: int = 10, tol: float = 1e-10) -> None:
    m = rot.size
    rng = range(-max_order, max_order + 1)
    cands = sorted(itertools.product(rng, repeat=m), key=lambda q: sum(map(abs, q)))
    for p in cands:
        p = np.array(p)
        if not p.any() or np.abs(p).sum() > max_order:
            continue
        s = float(p @ rot)
        if abs(s - round(s)) < tol:
            warnings.warn(f"rotation vector {rot} is resonant: p={tuple(int(k) for k in p)} gives p.alpha={s:.3g}",
                          RuntimeWarning, stacklevel=3)
            return


def forcing_E(theta, p: ModelParams) -> np.ndarray:
    """Centre of the potential, shape ``(..., d)``."""
    theta = np.asarray(theta, float)
    chan = p.amp * np.sin(2 * np.pi * theta)
    return chan @ p.channel_map.T


def potential(y, delta) -> np.ndarray:
    y = np.asarray(y, float)
    return np.sum(-0.5 * y**2 - 0.25 * delta * y**4, axis=-1)


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10 - 15 * s + 6 * s**2), 30 * s**2 * (1 - s) ** 2, 60 * s - 180 * s**2 + 120 * s**3


def cutoff(y, n):
    """Quintic-smoothstep bump: 1 on |y| <= n, 0 on |y| >= 2n. Returns (chi, chi', chi'')."""
    y = np.asarray(y, float)
    s = (np.abs(y) - n) / n
    inside = (s > 0) & (s < 1)
    S, dS, d2S = _smoothstep(s)
    chi = 1.0 - S
    dchi = np.where(inside, -dS * np.sign(y) / n, 0.0)
    d2chi = np.where(inside, -d2S / n**2, 0.0)
    return chi, dchi, d2chi


def _require_cut(p: ModelParams):
    if p.n_cut is None:
        raise ConfigError("cut-off drift requested but model.n_cut is unset")
    return p.n_cut


def drift(z, theta, p: ModelParams, cut: bool = False) -> np.ndarray:
    z = np.asarray(z, float)
    d = p.d
    x, v = z[..., :d], z[..., d:]
    y = x - forcing_E(theta, p)
    dv = -p.gamma * v + y + p.delta * y**3
    if cut:
        n = _require_cut(p)
        chi_v, _, _ = cutoff(v, n)
        chi_y, dchi_y, _ = cutoff(y, n)
        U = -0.5 * y**2 - 0.25 * p.delta * y**4
        dU = -y - p.delta * y**3
        # bit-identical to the uncut field where both bumps equal 1
        dv = np.where((chi_v == 1) & (chi_y == 1), dv,
                      -p.gamma * v * chi_v - (dU * chi_y + U * dchi_y))
    return np.concatenate([v, dv], axis=-1)


def jacobian_drift(z, theta, p: ModelParams, cut: bool = False) -> np.ndarray:
    z = np.asarray(z, float)
    d = p.d
    x, v = z[..., :d], z[..., d:]
    y = x - forcing_E(theta, p)
    J = np.zeros(z.shape[:-1] + (2 * d, 2 * d))
    idx = np.arange(d)
    J[..., idx, d + idx] = 1.0
    if not cut:
        J[..., d + idx, idx] = 1.0 + 3 * p.delta * y**2
        J[..., d + idx, d + idx] = -p.gamma
    else:
        n = _require_cut(p)
        chi_v, dchi_v, _ = cutoff(v, n)
        chi_y, dchi_y, d2chi_y = cutoff(y, n)
        U = -0.5 * y**2 - 0.25 * p.delta * y**4
        dU = -y - p.delta * y**3
        d2U = -1.0 - 3 * p.delta * y**2
        J[..., d + idx, idx] = -(d2U * chi_y + 2 * dU * dchi_y + U * d2chi_y)
        J[..., d + idx, d + idx] = -p.gamma * (chi_v + v * dchi_v)
    return J


def potential_lower_bound(p: ModelParams) -> float:
    """inf over R^d of the separable potential (finite only for delta < 0)."""
    if p.delta >= 0:
        return -np.inf
    return p.d / (4 * p.delta)


def lyapunov_H(z, theta, p: ModelParams, C: float) -> np.ndarray:
    """Lyapunov function used for the exit-time estimate; strictly positive when admissible."""
    if not C > -potential_lower_bound(p):
        raise ValueError(f"offset C={C} must exceed -inf U = {-potential_lower_bound(p)}")
    z = np.asarray(z, float)
    d = p.d
    x, v = z[..., :d], z[..., d:]
    y = x - forcing_E(theta, p)
    return (0.5 * np.sum(v**2, axis=-1) + potential(y, p.delta)
            + 0.5 * p.gamma * np.sum(x * v, axis=-1)
            + 0.25 * p.gamma**2 * np.sum(x**2, axis=-1) + C)
