"""Command line driver: ``nhtori <subcommand> --config run.toml --out dir``."""
from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, _kernels, flow, perturbation as pt, stats, torus_solver as ts
from .config import RunConfig, parse_config
from .errors import CertificationError, ConfigError, DependencyError, NhtoriError
from .fourier_torus import TorusGrid, matrix_on_grid, on_grid, read_torus, write_torus
from .noise import realization_seed

COMMANDS = ("solve-k0", "reduce", "expand", "montecarlo", "lyapunov", "exit-prob", "flow", "verify")


def _versions() -> dict:
    import scipy
    out = {"nhtori": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "scipy": scipy.__version__, "backend": _kernels.BACKEND}
    if _kernels.HAVE_NUMBA:
        import numba
        out["numba"] = numba.__version__
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not serializable: {type(v)}")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.12g}"
    if isinstance(x, np.ndarray):
        return ";".join(_fmt(v) for v in x.ravel())
    return x


def _write_dat(path, header, rows):
    with open(path, "w") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for r in rows:
            fh.write(" ".join(str(_fmt(x)).replace(";", " ") for x in r) + "\n")


# ------------------------------------------------------------------ artifact loading

def _load_torus(cfg: RunConfig, out: Path, need_frame=True):
    path = out / "K0.torus"
    if not path.exists():
        raise DependencyError(f"missing {path}: run `nhtori solve-k0` first")
    K0 = read_torus(path)
    if not need_frame:
        return K0
    kw = cfg.solver_kwargs()
    P0 = out / "P0.torus"
    frame = ts.solve_reducibility(K0, cfg.model, grid=TorusGrid(cfg.grid), modes=K0.modes,
                                  tol_red=kw["tol_red"], cond_max=kw["cond_max"], h=kw["h"],
                                  n_sub=kw["n_sub"], P_init=read_torus(P0) if P0.exists() else None)
    if not frame.certified:
        raise CertificationError("; ".join(frame.notes))
    res = ts.invariance_residual(K0, cfg.model, grid=TorusGrid(cfg.grid), h=kw["h"], n_sub=kw["n_sub"])
    return ts.DeterministicTorus(K0, res, frame, (res,), TorusGrid(cfg.grid))


def _common(cfg):
    n = cfg["numerics"]
    return dict(tol=n["tol_coh"], N_max=n["N_max"], h=cfg.noise_h, n_sub=cfg.n_sub)


# ------------------------------------------------------------------ subcommands

def cmd_solve_k0(cfg, out, args, info):
    p = cfg.model
    det = ts.solve_K0(p, modes=cfg.modes, grid=TorusGrid(cfg.grid), **cfg.solver_kwargs())
    write_torus(out / "K0.torus", det.K0)
    write_torus(out / "P0.torus", det.frame.P0)
    write_torus(out / "Lambda0.torus", det.frame.Lambda0)
    lS, lU, cH = ts.hyperbolicity_margin(det.frame)
    rep = {"residual": det.residual, "newton_history": list(det.history), "lam_S": lS,
           "lam_U": lU, "c_H": cH, "d_S": det.frame.d_S, "d_U": det.frame.d_U,
           "Lambda0_mean_diag": np.diag(det.frame.Lambda0.coeff((0,) * p.m).real.reshape(
               det.frame.n2, det.frame.n2)).tolist()}
    _write_json(out / "report.json", rep)
    if args.plot_data:
        g = TorusGrid(cfg.grid)
        vals = on_grid(det.K0, g).reshape(g.size, -1)
        _write_dat(out / "K0.dat", ["theta..."] + [f"z{c}" for c in range(vals.shape[1])],
                   [list(th) + list(v) for th, v in zip(g.nodes(), vals)])
    info["result"] = rep


def cmd_reduce(cfg, out, args, info):
    det = _load_torus(cfg, out)
    fr = det.frame
    write_torus(out / "P0.torus", fr.P0)
    write_torus(out / "Lambda0.torus", fr.Lambda0)
    lS, lU, cH = ts.hyperbolicity_margin(fr)
    rep = {"reducibility_residual": fr.residual, "cond": fr.cond, "d_S": fr.d_S, "d_U": fr.d_U,
           "lam_S": lS, "lam_U": lU, "c_H": cH, "iterations": fr.iterations}
    _write_json(out / "reduce.json", rep)
    if args.plot_data:
        g = TorusGrid(cfg.grid)
        lam = matrix_on_grid(fr.Lambda0, g).reshape(g.size, fr.n2, fr.n2)
        _write_dat(out / "Lambda0.dat", ["theta..."] + [f"L{i}{i}" for i in range(fr.n2)],
                   [list(th) + list(np.diag(L)) for th, L in zip(g.nodes(), lam)])
    info["result"] = rep


def _summary_rows(theta, K, order):
    """Moments of each K_k component at each probe theta."""
    rows = []
    for k in range(1, order + 1):
        summ = stats.EnsembleSummary.from_samples(K[:, k], theta)
        for th, c, *mom in summ.rows():
            rows.append((th, f"K{k}[{c}]", *mom))
    return rows


def cmd_expand(cfg, out, args, info):
    p = cfg.model
    det = _load_torus(cfg, out)
    order = args.order if args.order is not None else cfg["expand"]["order"]
    n_real = args.samples if args.samples is not None else cfg["expand"]["samples"]
    if order > cfg["numerics"]["max_order"]:
        raise DependencyError(f"order {order} exceeds numerics.max_order")
    kw = _common(cfg)
    seed = cfg["noise"]["seed"]
    need = pt.lambda_need(det.frame, kw["tol"])
    lo, hi = pt.window_depths(order, det.frame.margins, need=need, tol=kw["tol"], N_max=kw["N_max"])
    seeds, res = [], []
    for i in range(n_real):
        s = realization_seed(seed, i)
        om = pt.orbit_noise(s, lo, hi, p.d, kw["h"])
        b = pt.build_bundle(det.K0, det.frame, p, om, order, tol=kw["tol"], N_max=kw["N_max"],
                            n_sub=kw["n_sub"], grid=TorusGrid(cfg.grid))
        for k in range(1, order + 1):
            write_torus(out / f"K{k}_{i}.torus", b.K[k])
        if b.Lambda1 is not None:
            write_torus(out / f"Lambda1_{i}.torus", b.Lambda1)
        seeds.append(s)
        res.append(b.residuals)
    theta = stats.probe_thetas(p.m, cfg["expand"]["probes_per_axis"])
    rows = []
    if order >= 1:
        n_stat = cfg["noise"]["n_samples"]
        K, failed, _ = stats.expansion_samples(det, p, order, theta, n_stat, seed, **kw)
        rows = _summary_rows(theta, K, order)
        info["summary_samples"] = int(K.shape[0])
        info["summary_failed"] = int(failed)
    _write_csv(out / "expand_summary.csv", ["theta", "component", "mean", "var", "skew", "kurtosis"], rows)
    if args.plot_data:
        _write_dat(out / "expand_summary.dat", ["theta", "component", "mean", "var", "skew", "kurtosis"], rows)
    info["seeds"] = seeds
    info["result"] = {"order": order, "realizations": n_real, "Kk_residuals": res,
                      "window": [lo, hi]}


def cmd_montecarlo(cfg, out, args, info):
    p = cfg.model
    det = _load_torus(cfg, out)
    mc = cfg["montecarlo"]
    theta = stats.probe_thetas(p.m, mc["probes_per_axis"])
    nz = cfg["noise"]
    summ = stats.mc_torus_moments(det, p, mc["order"], nz["epsilon"], theta, nz["n_samples"],
                                  nz["seed"], **_common(cfg))
    header = ["theta", "component", "mean", "var", "skew", "kurtosis", "se_mean", "se_var",
              "se_skew", "se_kurtosis"]
    rows = []
    for i, th in enumerate(summ.theta):
        for c in range(summ.mean.shape[1]):
            rows.append((th, c, summ.mean[i, c], summ.var[i, c], summ.skew[i, c],
                         summ.kurtosis[i, c], summ.se_mean[i, c], summ.se_var[i, c],
                         summ.se_skew, summ.se_kurtosis))
    _write_csv(out / "montecarlo.csv", header, rows)
    if args.plot_data:
        _write_dat(out / "montecarlo.dat", header, rows)
    info["seeds"] = list(summ.seeds)
    info["result"] = {"n_samples": summ.n_samples, "n_failed": summ.n_failed,
                      "theta_averaged": {k: v.tolist() for k, v in summ.theta_averaged().items()}}


def cmd_lyapunov(cfg, out, args, info):
    p = cfg.model
    det = _load_torus(cfg, out)
    ly = cfg["lyapunov"]
    nz = cfg["noise"]
    rep = stats.lyapunov_spectrum(det, p, nz["epsilon"], ly["n_steps"], nz["n_samples"], nz["seed"],
                                  warmup=ly["warmup"], theta0=ly["theta0"], **_common(cfg))
    header = ["index", "base", "correction", "perturbative", "perturbative_se", "direct", "direct_se"]
    rows = list(rep.rows())
    _write_csv(out / "lyapunov.csv", header, rows)
    if args.plot_data:
        _write_dat(out / "lyapunov.dat", header, rows)
    info["result"] = {"direct": rep.direct_mean.tolist(), "perturbative": rep.pert_mean.tolist()}


def cmd_exit_prob(cfg, out, args, info):
    ex = cfg["exit"]
    nz = cfg["noise"]
    rows = stats.exit_probability(cfg.model, ex["n_grid"], ex["R"], ex["T"], nz["n_samples"],
                                  nz["epsilon"], nz["seed"], h=cfg["numerics"]["h"], n_ic=ex["n_ic"])
    header = ["n", "p_hat", "ci_low", "ci_high", "exits", "samples"]
    data = [(r.n, r.p_hat, r.ci_low, r.ci_high, r.exits, r.samples) for r in rows]
    _write_csv(out / "exit_prob.csv", header, data)
    if args.plot_data:
        _write_dat(out / "exit_prob.dat", header, data)
    mono = stats.monotone_up_to_ci(rows)
    info["result"] = {"monotone": mono}
    if not mono:
        raise CertificationError("exit-probability estimates are not non-increasing up to the CIs")


def cmd_flow(cfg, out, args, info):
    p = cfg.model
    fl = cfg["flow"]
    nz = cfg["noise"]
    z0 = np.zeros(2 * p.d) if fl["z0"] is None else np.asarray(fl["z0"], float)
    th0 = np.zeros(p.m) if fl["theta0"] is None else np.asarray(fl["theta0"], float)
    units = fl["units"]
    om = pt.orbit_noise(realization_seed(nz["seed"], 0), 0, units, p.d, cfg.noise_h)
    rows = [(0, *z0)]
    z, th = z0, th0
    for j in range(units):
        z = flow.time_one_map(z, th, om, nz["epsilon"], p, offset=float(j), n_sub=cfg.n_sub)
        th = np.mod(th + p.rotation, 1.0)
        rows.append((j + 1, *z))
    header = ["t"] + [f"z{c}" for c in range(2 * p.d)]
    _write_csv(out / "flow.csv", header, rows)
    der = flow.epsilon_derivatives(z0, th0, om, p, fl["order"], n_sub=cfg.n_sub,
                                   max_order=cfg["numerics"]["max_order"])
    _write_csv(out / "flow_derivatives.csv", ["k"] + header[1:],
               [(k, *der.values[k]) for k in range(fl["order"] + 1)])
    M = flow.variational_matrix(z0, th0, om, nz["epsilon"], p, n_sub=cfg.n_sub)
    np.set_printoptions(precision=10)
    print(f"z1 = {rows[1][1:] if units else z0}")
    print(f"M =\n{M}")
    print(f"d^k Z / d eps^k at eps = 0, k = 0..{fl['order']}:\n{der.values}")
    if args.plot_data:
        _write_dat(out / "flow.dat", header, rows)
    info["seeds"] = [om.seed]
    info["result"] = {"z_final": z.tolist()}


def cmd_verify(cfg, out, args, info):
    from .verify import run_verify
    checks = run_verify(cfg)
    _write_csv(out / "verify.csv", ["check", "passed", "seconds", "detail"],
               [(c.name, c.passed, c.seconds, c.detail) for c in checks])
    for c in checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    info["result"] = {c.name: c.passed for c in checks}
    bad = [c.name for c in checks if not c.passed]
    if bad:
        raise CertificationError("verify checks failed: " + ", ".join(bad))


HANDLERS = {"solve-k0": cmd_solve_k0, "reduce": cmd_reduce, "expand": cmd_expand,
            "montecarlo": cmd_montecarlo, "lyapunov": cmd_lyapunov, "exit-prob": cmd_exit_prob,
            "flow": cmd_flow, "verify": cmd_verify}


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nhtori", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="TOML run configuration")
        s.add_argument("--out", default=None, help="output directory (default: output.dir)")
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--plot-data", action="store_true", help="also write gnuplot .dat files")
        s.add_argument("--seed-override", type=int, default=None, help="replace noise.seed")
        if name == "expand":
            s.add_argument("--order", type=int, default=None)
            s.add_argument("--samples", type=int, default=None)
    return ap


def run(cfg: RunConfig, command: str, out, args=None) -> int:
    """Execute one subcommand and write manifest.json; returns the exit status."""
    args = args or build_parser().parse_args([command, "--config", "-"])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _kernels.set_threads(args.threads)
    info = {"command": command, "config": cfg.echo(), "config_path": cfg.source,
            "versions": _versions(), "threads": args.threads, "seed": cfg["noise"]["seed"]}
    t0 = time.perf_counter()
    status, reason = 0, "ok"
    try:
        HANDLERS[command](cfg, out, args, info)
    except NhtoriError as exc:
        status, reason = exc.exit_code, exc.reason
        info["message"] = str(exc)
        print(f"nhtori {command}: {type(exc).__name__}: {exc}", file=sys.stderr)
    info.update(status=status, reason=reason, wall_time=time.perf_counter() - t0)
    _write_json(out / "manifest.json", info)
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.seed_override is not None:
            if args.seed_override < 0 or args.seed_override >= 2**64:
                raise ConfigError("--seed-override must be an unsigned 64-bit integer")
            cfg = cfg.with_seed(args.seed_override)
    except NhtoriError as exc:
        print(f"nhtori: {exc}", file=sys.stderr)
        return 2
    out = args.out or cfg["output"]["dir"]
    return run(cfg, args.command, out, args)


if __name__ == "__main__":
    sys.exit(main())
