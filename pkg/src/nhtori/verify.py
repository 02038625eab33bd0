"""Invariant suite run by ``nhtori verify``: one fast check per module property."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import flow, noise, perturbation as pt, stats, torus_solver as ts
from .fourier_torus import FourierTorus, TorusGrid, analyze, on_grid, rotate
from .model import drift, jacobian_drift


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _fourier(cfg, ctx):
    rng = np.random.default_rng(1)
    modes = (3,) * cfg.model.m
    c = rng.normal(size=tuple(2 * n + 1 for n in modes) + (2,)) + 1j * rng.normal(size=tuple(2 * n + 1 for n in modes) + (2,))
    t = FourierTorus(c, modes)
    t = FourierTorus(0.5 * (t.coeffs + np.conj(t.coeffs[tuple([slice(None, None, -1)] * len(modes))])), modes)
    grid = TorusGrid.for_modes(modes)
    rt = analyze(on_grid(t, grid), modes, grid)
    a1, a2 = rng.random(len(modes)), rng.random(len(modes))
    comp = np.abs(rotate(t, a1 + a2).coeffs - rotate(rotate(t, a1), a2).coeffs).max()
    err = np.abs(rt.coeffs - t.coeffs).max()
    return err < 1e-12 and comp < 1e-13, f"round trip {err:.1e}, rotation composition {comp:.1e}"


def _model(cfg, ctx):
    p = cfg.model
    rng = np.random.default_rng(2)
    z = rng.normal(size=(20, 2 * p.d))
    th = rng.random((20, p.m))
    split = np.abs((drift(z, th, p) - z @ p.A.T)[:, :p.d]).max()
    h = 1e-5
    J = jacobian_drift(z, th, p)
    fd = np.stack([(drift(z + h * e, th, p) - drift(z - h * e, th, p)) / (2 * h)
                   for e in np.eye(2 * p.d)], axis=-1)
    jerr = np.abs(J - fd).max()
    return split == 0 and jerr < 1e-6, f"B position block {split:.1e}, Jacobian vs FD {jerr:.1e}"


def _noise(cfg, ctx):
    om = noise.sample_path(cfg["noise"]["seed"], cfg.noise_h, -5, 5, cfg.model.d)
    a = noise.wiener_shift(noise.wiener_shift(om, 1.0), 2.0)
    b = noise.wiener_shift(om, 3.0)
    same = np.array_equal(a.path(), b.path()) and a.origin == b.origin
    ok = om.W(0.0).tolist() == [0.0] * om.d and same and not om.ou_samples()[:, :om.d].any()
    return ok, f"W(0)=0, shift composition exact={same}, position block zero"


def _flow(cfg, ctx):
    p = cfg.model
    om = noise.sample_path(cfg["noise"]["seed"] + 1, cfg.noise_h, -1, 4, p.d)
    z0 = np.full(2 * p.d, 0.2)
    th = np.zeros(p.m)
    eps = 0.05
    two = flow.time_one_map(z0, th, om, eps, p, units=2, n_sub=cfg.n_sub)
    one = flow.time_one_map(z0, th, om, eps, p, n_sub=cfg.n_sub)
    one = flow.time_one_map(one, np.mod(th + p.rotation, 1), om, eps, p, offset=1.0, n_sub=cfg.n_sub)
    coc = np.abs(two - one).max()
    bell = flow.epsilon_derivatives(z0, th, om, p, 3, n_sub=cfg.n_sub).values
    jet = flow.epsilon_jets(z0, th, om, p, 3, n_sub=cfg.n_sub).values
    berr = np.abs(bell - jet).max()
    return coc < 1e-8 and berr < 1e-10, f"cocycle {coc:.1e}, Bell hierarchy vs jets {berr:.1e}"


def _torus(cfg, ctx):
    det = ctx["det"]
    n = cfg["numerics"]
    fr = det.frame
    lS, lU, cH = ts.hyperbolicity_margin(fr)
    ok = det.residual <= n["tol_inv"] and fr.residual <= n["tol_red"] and lS < 1 and lU < 1
    return ok, (f"K0 residual {det.residual:.1e}, reducibility residual {fr.residual:.1e}, "
                f"lam_S {lS:.4f}, lam_U {lU:.4f}, c_H {cH:.3f}")


def _contraction(cfg, ctx):
    fr = ctx["det"].frame
    p = cfg.model
    s = fr.d_S
    v = np.ones(s)
    v0 = np.linalg.norm(v)
    for j in range(30):
        v = fr.Lam(np.mod(j * p.rotation, 1.0))[:s, :s] @ v
    ratio = np.linalg.norm(v) / v0
    bound = fr.margins[0] ** 30
    return ratio <= bound * (1 + 1e-6), f"30-step stable shrink {ratio:.3e} <= {bound:.3e}"


def _expansion(cfg, ctx):
    det, p = ctx["det"], cfg.model
    n = cfg["numerics"]
    need = pt.lambda_need(det.frame, n["tol_coh"])
    lo, hi = pt.window_depths(1, det.frame.margins, need=need, tol=n["tol_coh"], N_max=n["N_max"])
    th = stats.probe_thetas(p.m, 4)
    w, _ = pt.ensemble_window(th, cfg["noise"]["seed"], 2, p, lo, hi, h=cfg.noise_h)
    ex = pt.expand_orbits(w, det.K0, det.frame, p, 1, tol=n["tol_coh"], need=need, n_sub=cfg.n_sub)
    r1 = float(pt.kk_residual(ex, 1, p, n_sub=cfg.n_sub).max())
    fo = pt.lambda_first_order(ex, det.frame, p, tol=n["tol_coh"], n_sub=cfg.n_sub)
    rl = float(pt.reducibility_residual(fo, ex).max())
    s = det.frame.d_S
    off = float(np.abs(fo.Lambda1[..., :s, s:]).max() + np.abs(fo.Lambda1[..., s:, :s]).max())
    # linearity in the path
    w2 = pt.OrbitWindow(w.theta, 2.0 * w.zeta, w.ridx, w.start, w.spu, w.lo, w.hi, w.rotation)
    ex2 = pt.expand_orbits(w2, det.K0, det.frame, p, 1, tol=2 * n["tol_coh"], need=need, n_sub=cfg.n_sub)
    lin = float(np.abs(ex2.at(1, 0) - 2 * ex.at(1, 0)).max())
    ok = r1 <= n["tol_coh"] and rl <= 1e-7 and off == 0 and lin < 1e-8
    return ok, f"K1 residual {r1:.1e}, Q1 residual {rl:.1e}, Lam1 off-block {off}, linearity {lin:.1e}"


def _lyapunov(cfg, ctx):
    det, p = ctx["det"], cfg.model
    a = stats.lyapunov_spectrum(det, p, 0.0, 60, 2, seed=1, n_sub=cfg.n_sub, h=cfg.noise_h)
    b = stats.lyapunov_spectrum(det, p, 0.0, 60, 2, seed=2, n_sub=cfg.n_sub, h=cfg.noise_h)
    trace = abs(a.direct_mean.sum() + p.gamma * p.d)
    diff = float(np.abs(a.direct_mean - b.direct_mean).max())
    return trace < 1e-6 and diff < 1e-9, f"sum + gamma d = {trace:.1e}, seed batches differ by {diff:.1e}"


def _pullback(cfg, ctx):
    p = cfg.model
    om = noise.sample_path(3, cfg.noise_h, -1, 1, p.d)
    K = np.random.default_rng(3).normal(size=(8, 2 * p.d))
    back = stats.pushforward_to_rde(stats.pullback_to_sde(K, om, 0.1), om, 0.1)
    err = np.abs(back - K).max()
    return err <= 4 * np.spacing(np.abs(K).max() + 1.0), f"push-forward after pull-back {err:.1e}"


def _ergodic(cfg, ctx):
    p = cfg.model
    r = stats.ergodic_average_test(lambda th, z: np.ones(len(th)), p, 200, 4, seed=1)
    N = 2000
    th = np.mod(np.arange(N)[:, None] * p.rotation, 1.0)
    weyl = abs(np.cos(2 * np.pi * th[:, 0]).mean())
    return r.deviation == 0 and weyl <= 5 / N, f"constant deviation {r.deviation}, Weyl average {weyl:.1e}"


CHECKS = [("fourier_torus", _fourier), ("model", _model), ("noise", _noise), ("flow", _flow),
          ("torus_solver", _torus), ("stable_contraction", _contraction),
          ("perturbation", _expansion), ("lyapunov", _lyapunov), ("pullback", _pullback),
          ("ergodic", _ergodic)]


def run_verify(cfg, det=None) -> list[Check]:
    p = cfg.model
    if det is None:
        det = ts.solve_K0(p, modes=cfg.modes, grid=TorusGrid(cfg.grid), **cfg.solver_kwargs())
    ctx = {"det": det}
    out = []
    for name, fn in CHECKS:
        t = time.perf_counter()
        try:
            ok, detail = fn(cfg, ctx)
        except Exception as exc:  # a crash is a failed check, reported with its message
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(Check(name, bool(ok), detail, time.perf_counter() - t))
    return out
