"""Time the RK4 jet kernel under both backends.

    python3 benchmarks/bench_kernels.py --orbits 2000 --order 2

Runs each backend in a fresh interpreter with NHTORI_BACKEND set, so the module-level
backend switch is what gets measured. The first numba call (JIT or cache load) is
reported separately from the steady-state timing.
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from nhtori import _kernels
n, K, units, reps = map(int, sys.argv[1:5])
rng = np.random.default_rng(0)
z0 = rng.normal(size=(n, K + 1, 2)) * 0.3
zeta = rng.normal(size=(4, 64 * (units + 2), 1))
kw = dict(spu=64, n_sub=1, n_units=units, eps0=0.05, gamma=1.0, delta=-1.0,
          amp=np.array([0.1]), rot=np.array([1.94]), cmap=np.ones((1, 1)), matrix_order=0)
args = (z0, rng.random((n, 1)), zeta, rng.integers(0, 4, n), rng.integers(0, 64, n))
t = time.perf_counter(); _kernels.jet_flow(*args, **kw); first = time.perf_counter() - t
best = np.inf
for _ in range(reps):
    t = time.perf_counter(); z, M, _ = _kernels.jet_flow(*args, **kw); best = min(best, time.perf_counter() - t)
print(json.dumps({"backend": _kernels.BACKEND, "first": first, "best": best,
                  "checksum": float(np.abs(z).sum() + np.abs(M).sum())}))
"""


def run(backend, a):
    env = dict(os.environ, NHTORI_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", WORKER, str(a.orbits), str(a.order), str(a.units),
                          str(a.reps)], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--orbits", type=int, default=2000)
    ap.add_argument("--order", type=int, default=2, help="highest eps-jet order")
    ap.add_argument("--units", type=int, default=1, help="time units integrated")
    ap.add_argument("--reps", type=int, default=3)
    a = ap.parse_args()
    res = {b: run(b, a) for b in ("numba", "numpy")}
    print(f"{a.orbits} orbits, jets to order {a.order}, {a.units} time unit(s), h = 1/64")
    print(f"{'backend':8s} {'first call':>11s} {'best':>9s}")
    for b, r in res.items():
        print(f"{b:8s} {r['first']:10.3f}s {r['best']:8.3f}s")
    rel = abs(res["numba"]["checksum"] - res["numpy"]["checksum"]) / abs(res["numpy"]["checksum"])
    print(f"speed-up {res['numpy']['best'] / res['numba']['best']:.1f}x, checksum rel. diff {rel:.1e}")


if __name__ == "__main__":
    main()
