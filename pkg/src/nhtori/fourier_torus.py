"""Truncated real Fourier series on the m-torus.

Coefficients are stored as a dense complex array of shape
``(2*N_1+1, ..., 2*N_m+1, d_out)``; array index ``k_j + N_j`` holds mode ``k_j``.
Angles are measured in turns (period 1).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class TorusGrid:
    """Uniform tensor-product grid with ``points_per_axis[j]`` nodes on axis j."""

    points_per_axis: tuple[int, ...]

    def __post_init__(self):
        pts = tuple(int(p) for p in self.points_per_axis)
        if any(p < 2 or p % 2 for p in pts):
            raise ConfigError(f"grid sizes must be even and >= 2, got {pts}")
        object.__setattr__(self, "points_per_axis", pts)

    @property
    def m(self) -> int:
        return len(self.points_per_axis)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points_per_axis

    @property
    def size(self) -> int:
        return int(np.prod(self.points_per_axis))

    def nodes(self) -> np.ndarray:
        """Grid nodes as an ``(size, m)`` array in C order."""
        axes = [np.arange(p) / p for p in self.points_per_axis]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([a.ravel() for a in mesh], axis=-1)

    def check_modes(self, modes) -> None:
        for g, n in zip(self.points_per_axis, modes):
            if g < 2 * n + 2:
                raise ConfigError(
                    f"grid {g} cannot resolve {n} modes without aliasing (need >= {2 * n + 2})"
                )

    @classmethod
    def for_modes(cls, modes, oversample: int = 2) -> "TorusGrid":
        return cls(tuple(oversample * (2 * n + 2) for n in modes))


@dataclass(frozen=True, eq=False)
class FourierTorus:
    coeffs: np.ndarray
    modes: tuple[int, ...]

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        modes = tuple(int(n) for n in self.modes)
        if c.ndim != len(modes) + 1:
            raise ValueError("coeffs must have one axis per torus dimension plus a component axis")
        if c.shape[:-1] != tuple(2 * n + 1 for n in modes):
            raise ValueError(f"coefficient shape {c.shape} does not match modes {modes}")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "modes", modes)

    @property
    def m(self) -> int:
        return len(self.modes)

    @property
    def d_out(self) -> int:
        return self.coeffs.shape[-1]

    def coeff(self, k) -> np.ndarray:
        k = np.atleast_1d(k)
        idx = tuple(int(kj) + n for kj, n in zip(k, self.modes))
        return self.coeffs[idx]

    def wavenumbers(self) -> list[np.ndarray]:
        return [np.arange(-n, n + 1) for n in self.modes]

    @classmethod
    def zeros(cls, modes, d_out: int) -> "FourierTorus":
        shape = tuple(2 * n + 1 for n in modes) + (d_out,)
        return cls(np.zeros(shape, complex), tuple(modes))

    @classmethod
    def constant(cls, value, modes) -> "FourierTorus":
        value = np.atleast_1d(np.asarray(value, float))
        t = np.zeros(tuple(2 * n + 1 for n in modes) + (value.size,), complex)
        t[tuple(n for n in modes)] = value
        return cls(t, tuple(modes))

    def __add__(self, other: "FourierTorus") -> "FourierTorus":
        _check_compatible(self, other)
        return FourierTorus(self.coeffs + other.coeffs, self.modes)

    def __sub__(self, other: "FourierTorus") -> "FourierTorus":
        _check_compatible(self, other)
        return FourierTorus(self.coeffs - other.coeffs, self.modes)

    def __mul__(self, scalar) -> "FourierTorus":
        return FourierTorus(self.coeffs * scalar, self.modes)

    __rmul__ = __mul__

    def __neg__(self) -> "FourierTorus":
        return FourierTorus(-self.coeffs, self.modes)

    def tail(self) -> float:
        """Largest coefficient magnitude on the outermost retained mode shell."""
        mags = np.abs(self.coeffs).max(axis=-1)
        shell = np.zeros(mags.shape, bool)
        for ax in range(self.m):
            sl = [slice(None)] * self.m
            sl[ax] = 0
            shell[tuple(sl)] = True
            sl[ax] = -1
            shell[tuple(sl)] = True
        return float(mags[shell].max())

    def tail_ratio(self) -> float:
        top = float(np.abs(self.coeffs).max())
        return 0.0 if top == 0.0 else self.tail() / top

    def sup_norm(self, oversample: int = 4) -> float:
        """Max of the Euclidean component norm over a dense uniform grid."""
        grid = TorusGrid(tuple(oversample * (2 * n + 2) for n in self.modes))
        vals = on_grid(self, grid)
        return float(np.linalg.norm(vals, axis=-1).max())


def _check_compatible(a: FourierTorus, b: FourierTorus) -> None:
    if a.modes != b.modes or a.d_out != b.d_out:
        raise ValueError("tori differ in modes or output dimension")


def _mode_index(modes, grid_shape):
    return tuple(np.arange(-n, n + 1) % g for n, g in zip(modes, grid_shape))


def analyze(values, modes, grid: TorusGrid | None = None) -> FourierTorus:
    """Coefficients of the trigonometric interpolant of grid samples.

    ``values`` has shape ``(*grid.shape, d_out)`` (or ``(*grid.shape,)`` for scalars).
    """
    values = np.asarray(values, dtype=float)
    modes = tuple(int(n) for n in modes)
    m = len(modes)
    if values.ndim == m:
        values = values[..., None]
    grid = grid or TorusGrid(values.shape[:m])
    if values.shape[:m] != grid.shape:
        raise ValueError(f"values shape {values.shape} does not match grid {grid.shape}")
    grid.check_modes(modes)
    bad = ~np.isfinite(values)
    if bad.any():
        node = [int(i) for i in np.argwhere(bad)[0]]
        theta = tuple(float(i) / g for i, g in zip(node[:m], grid.shape))
        raise ValueError(f"non-finite sample at grid node {tuple(node[:m])} (theta={theta}), "
                         f"component {node[m]}")
    spec = np.fft.fftn(values, axes=tuple(range(m))) / grid.size
    c = spec[np.ix_(*_mode_index(modes, grid.shape), np.arange(values.shape[-1]))]
    # enforce c(-k) = conj(c(k))
    flipped = np.conj(c[tuple([slice(None, None, -1)] * m)])
    return FourierTorus(0.5 * (c + flipped), modes)


def on_grid(t: FourierTorus, grid: TorusGrid) -> np.ndarray:
    """Values at all grid nodes, shape ``(*grid.shape, d_out)``."""
    grid.check_modes(t.modes)
    spec = np.zeros(grid.shape + (t.d_out,), complex)
    spec[np.ix_(*_mode_index(t.modes, grid.shape), np.arange(t.d_out))] = t.coeffs
    return np.fft.ifftn(spec, axes=tuple(range(t.m))).real * grid.size


def synthesize(t: FourierTorus, theta) -> np.ndarray:
    """Evaluate at one point ``(m,)`` or many points ``(n, m)`` by direct summation."""
    theta = np.asarray(theta, float)
    single = theta.ndim == 1
    pts = np.atleast_2d(theta)
    if pts.shape[-1] != t.m:
        raise ValueError(f"expected points with {t.m} angles, got shape {theta.shape}")
    pts = np.mod(pts, 1.0)
    out = t.coeffs[None]
    for ax, n in enumerate(t.modes):
        phase = np.exp(2j * np.pi * np.outer(pts[:, ax], np.arange(-n, n + 1)))
        out = np.einsum("pk...,pk->p...", out, phase)
    vals = out.real
    return vals[0] if single else vals


def rotate(t: FourierTorus, alpha) -> FourierTorus:
    """Exact coefficient-space representation of ``theta -> t(theta + alpha)``."""
    alpha = np.atleast_1d(np.asarray(alpha, float))
    factor = np.ones(t.coeffs.shape[:-1], complex)
    for ax, (n, a) in enumerate(zip(t.modes, alpha)):
        shape = [1] * t.m
        shape[ax] = 2 * n + 1
        factor = factor * np.exp(2j * np.pi * np.arange(-n, n + 1) * a).reshape(shape)
    return FourierTorus(t.coeffs * factor[..., None], t.modes)


def derivative(t: FourierTorus, axis: int = 0) -> FourierTorus:
    n = t.modes[axis]
    shape = [1] * t.m
    shape[axis] = 2 * n + 1
    k = (2j * np.pi * np.arange(-n, n + 1)).reshape(shape)
    return FourierTorus(t.coeffs * k[..., None], t.modes)


def resample_modes(t: FourierTorus, modes) -> FourierTorus:
    """Zero-pad or truncate to a new mode box."""
    modes = tuple(int(n) for n in modes)
    out = np.zeros(tuple(2 * n + 1 for n in modes) + (t.d_out,), complex)
    src, dst = [], []
    for n_old, n_new in zip(t.modes, modes):
        n = min(n_old, n_new)
        src.append(slice(n_old - n, n_old + n + 1))
        dst.append(slice(n_new - n, n_new + n + 1))
    out[tuple(dst)] = t.coeffs[tuple(src)]
    return FourierTorus(out, modes)


def write_torus(path, t: FourierTorus) -> None:
    lines = [f"{t.m} {t.d_out}", " ".join(str(n) for n in t.modes)]
    for k in itertools.product(*t.wavenumbers()):
        idx = tuple(kj + n for kj, n in zip(k, t.modes))
        ks = " ".join(str(int(kj)) for kj in k)
        for comp in range(t.d_out):
            c = t.coeffs[idx + (comp,)]
            lines.append(f"{ks} {comp} {c.real:.17g} {c.imag:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_torus(path) -> FourierTorus:
    lines = Path(path).read_text().split("\n")
    m, d_out = (int(x) for x in lines[0].split())
    modes = tuple(int(x) for x in lines[1].split())
    if len(modes) != m:
        raise ValueError(f"{path}: header declares m={m} but lists {len(modes)} mode counts")
    coeffs = np.zeros(tuple(2 * n + 1 for n in modes) + (d_out,), complex)
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != m + 3:
            raise ValueError(f"{path}:{lineno}: expected {m + 3} fields, got {len(parts)}")
        idx = tuple(int(k) + n for k, n in zip(parts[:m], modes))
        coeffs[idx + (int(parts[m]),)] = complex(float(parts[m + 1]), float(parts[m + 2]))
    return FourierTorus(coeffs, modes)


def analyze_matrix(values, modes, grid: TorusGrid | None = None) -> FourierTorus:
    """Matrix-valued samples ``(*grid.shape, n, n)`` stored with flattened components."""
    values = np.asarray(values, float)
    return analyze(values.reshape(values.shape[:-2] + (-1,)), modes, grid)


def synthesize_matrix(t: FourierTorus, theta) -> np.ndarray:
    """Evaluate a flattened square-matrix torus; returns ``(..., n, n)``."""
    n = int(round(np.sqrt(t.d_out)))
    if n * n != t.d_out:
        raise ValueError(f"component count {t.d_out} is not a square")
    v = synthesize(t, theta)
    return v.reshape(v.shape[:-1] + (n, n))


def matrix_on_grid(t: FourierTorus, grid: TorusGrid) -> np.ndarray:
    n = int(round(np.sqrt(t.d_out)))
    v = on_grid(t, grid)
    return v.reshape(v.shape[:-1] + (n, n))
