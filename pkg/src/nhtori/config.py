"""TOML run configuration: schema, defaults and exhaustive validation."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .model import ModelParams

_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19)

DEFAULTS = {
    "model": {"d": 1, "m": 1, "gamma": 1.0, "delta": -1.0, "amp": None, "alpha": None,
              "beta": None, "n_cut": None, "channel_map": None},
    "numerics": {"modes": 16, "grid": None, "h": 1.0 / 64, "tol_inv": 1e-9, "tol_red": 1e-9,
                 "tol_coh": 1e-6, "cond_max": 1e6, "N_max": 60, "max_newton": 25, "max_order": 3},
    "noise": {"seed": 0, "h": None, "n_samples": 100, "epsilon": 0.05},
    "expand": {"order": 1, "samples": 4, "probes_per_axis": 16},
    "montecarlo": {"order": 1, "probes_per_axis": 16},
    "lyapunov": {"n_steps": 200, "warmup": 20, "theta0": None},
    "exit": {"n_grid": [2.0, 4.0, 8.0, 16.0], "R": 1.0, "T": 10.0, "n_ic": 8},
    "flow": {"z0": None, "theta0": None, "order": 2, "units": 10},
    "verify": {"quick": True},
    "output": {"dir": "out"},
}


def default_alpha(m: int) -> list[float]:
    """Golden-mean frequency for m = 1, square roots of primes beyond that (rad/time)."""
    if m == 1:
        return [float(np.pi * (np.sqrt(5.0) - 1.0))]
    return [float(2 * np.pi * (np.sqrt(q) % 1.0)) for q in _PRIMES[:m]]


@dataclass(frozen=True, eq=False)
class RunConfig:
    data: dict
    source: str | None = None

    def __getitem__(self, section):
        return self.data[section]

    @property
    def model(self) -> ModelParams:
        m = self.data["model"]
        return ModelParams(d=m["d"], m=m["m"], gamma=m["gamma"], delta=m["delta"], amp=m["amp"],
                           alpha=m["alpha"], beta=m["beta"], n_cut=m["n_cut"],
                           channel_map=m["channel_map"])

    @property
    def modes(self) -> tuple[int, ...]:
        return tuple(self.data["numerics"]["modes"])

    @property
    def grid(self) -> tuple[int, ...]:
        return tuple(self.data["numerics"]["grid"])

    @property
    def n_sub(self) -> int:
        return int(round(self.data["noise"]["h"] / self.data["numerics"]["h"]))

    @property
    def noise_h(self) -> float:
        return float(self.data["noise"]["h"])

    def solver_kwargs(self) -> dict:
        n = self.data["numerics"]
        return dict(tol_inv=n["tol_inv"], tol_red=n["tol_red"], cond_max=n["cond_max"],
                    max_newton=n["max_newton"], h=self.noise_h, n_sub=self.n_sub)

    def with_seed(self, seed: int) -> "RunConfig":
        d = copy.deepcopy(self.data)
        d["noise"]["seed"] = int(seed)
        return RunConfig(d, self.source)

    def echo(self) -> dict:
        """JSON-serializable copy with every default filled in."""
        def conv(v):
            if isinstance(v, dict):
                return {k: conv(x) for k, x in v.items()}
            if isinstance(v, (list, tuple, np.ndarray)):
                return [conv(x) for x in v]
            if isinstance(v, np.generic):
                return v.item()
            return v
        return conv(self.data)


def _as_list(v, n, name, errors, cast=float):
    if v is None:
        return None
    arr = [v] * n if np.isscalar(v) else list(v)
    if len(arr) != n:
        errors.append(f"{name} must have {n} entries, got {len(arr)}")
        return None
    try:
        return [cast(x) for x in arr]
    except (TypeError, ValueError):
        errors.append(f"{name} entries must be numeric")
        return None


def validate(raw: dict, source: str | None = None) -> RunConfig:
    errors: list[str] = []
    data = copy.deepcopy(DEFAULTS)
    for section, values in raw.items():
        if section not in DEFAULTS:
            errors.append(f"unknown section [{section}]")
            continue
        if not isinstance(values, dict):
            errors.append(f"[{section}] must be a table")
            continue
        for key, val in values.items():
            if key not in DEFAULTS[section]:
                errors.append(f"unknown key {section}.{key}")
            else:
                data[section][key] = val

    mdl = data["model"]
    for key in ("d", "m"):
        if not isinstance(mdl[key], int) or mdl[key] < 1:
            errors.append(f"model.{key} must be a positive integer, got {mdl[key]!r}")
            mdl[key] = 1
    d, m = mdl["d"], mdl["m"]
    if not isinstance(mdl["gamma"], (int, float)) or not mdl["gamma"] > 0:
        errors.append(f"model.gamma must be > 0, got {mdl['gamma']!r}")
    if not isinstance(mdl["delta"], (int, float)):
        errors.append("model.delta must be a number")
    mdl["amp"] = _as_list(mdl["amp"], m, "model.amp", errors) or [0.0] * m
    mdl["alpha"] = _as_list(mdl["alpha"], m, "model.alpha", errors) or default_alpha(m)
    mdl["beta"] = _as_list(mdl["beta"], m, "model.beta", errors) or [0.0] * m
    if mdl["n_cut"] is not None and not (isinstance(mdl["n_cut"], (int, float)) and mdl["n_cut"] > 0):
        errors.append("model.n_cut must be positive")
    if mdl["channel_map"] is not None:
        cm = np.asarray(mdl["channel_map"], float)
        if cm.shape != (d, m):
            errors.append(f"model.channel_map must be {d}x{m}, got shape {cm.shape}")
        mdl["channel_map"] = cm.tolist()

    num = data["numerics"]
    num["modes"] = _as_list(num["modes"], m, "numerics.modes", errors, int) or [16] * m
    if num["grid"] is None:
        num["grid"] = [2 * (2 * n + 2) for n in num["modes"]]
    num["grid"] = _as_list(num["grid"], m, "numerics.grid", errors, int) or [2 * (2 * n + 2) for n in num["modes"]]
    for j, (g, n) in enumerate(zip(num["grid"], num["modes"])):
        if n < 0:
            errors.append(f"numerics.modes[{j}] must be >= 0")
        if g % 2 or g < 2:
            errors.append(f"numerics.grid[{j}]={g} must be even and >= 2")
        if g < 2 * n + 2:
            errors.append(f"numerics.grid[{j}]={g} aliases {n} modes (need >= {2 * n + 2})")
    for key in ("h", "tol_inv", "tol_red", "tol_coh", "cond_max"):
        if not isinstance(num[key], (int, float)) or not num[key] > 0:
            errors.append(f"numerics.{key} must be > 0, got {num[key]!r}")
    for key in ("N_max", "max_newton", "max_order"):
        if not isinstance(num[key], int) or num[key] < 1:
            errors.append(f"numerics.{key} must be a positive integer")

    nz = data["noise"]
    if nz["h"] is None:
        nz["h"] = num["h"]
    if not isinstance(nz["h"], (int, float)) or not nz["h"] > 0:
        errors.append("noise.h must be > 0")
    else:
        spu = 1.0 / nz["h"]
        if abs(spu - round(spu)) > 1e-9:
            errors.append(f"noise.h={nz['h']} must divide one time unit")
        if isinstance(num["h"], (int, float)) and num["h"] > 0:
            ratio = nz["h"] / num["h"]
            if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                errors.append(f"noise.h={nz['h']} must be an integer multiple of numerics.h={num['h']}")
    if not isinstance(nz["seed"], int) or nz["seed"] < 0:
        errors.append("noise.seed must be a non-negative integer")
    if not isinstance(nz["epsilon"], (int, float)) or nz["epsilon"] < 0:
        errors.append(f"noise.epsilon must be >= 0, got {nz['epsilon']!r}")
    if not isinstance(nz["n_samples"], int) or nz["n_samples"] < 1:
        errors.append("noise.n_samples must be a positive integer")

    ex = data["expand"]
    if not isinstance(ex["order"], int) or ex["order"] < 0:
        errors.append("expand.order must be a non-negative integer")
    elif isinstance(num["max_order"], int) and ex["order"] > num["max_order"]:
        errors.append(f"expand.order={ex['order']} exceeds numerics.max_order={num['max_order']}")
    fl = data["flow"]
    if not isinstance(fl["units"], int) or fl["units"] < 1:
        errors.append("flow.units must be a positive integer")
    if isinstance(fl["order"], int) and isinstance(num["max_order"], int) and fl["order"] > num["max_order"]:
        errors.append(f"flow.order={fl['order']} exceeds numerics.max_order={num['max_order']}")
    if isinstance(data["lyapunov"]["n_steps"], int) and data["lyapunov"]["n_steps"] < 50:
        errors.append("lyapunov.n_steps must be >= 50")
    if errors:
        where = f" in {source}" if source else ""
        raise ConfigError(f"invalid configuration{where}:\n  - " + "\n  - ".join(errors))
    try:
        cfg = RunConfig(data, source)
        cfg.model
    except ConfigError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    return validate(raw, str(path))


def loads(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"parse error: {exc}") from None
    return validate(raw)
