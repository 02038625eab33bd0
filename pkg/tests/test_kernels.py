import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nhtori import _kernels, perturbation as pt

needs_numba = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")


def kernel_args(seed, n=5, K=2, d=1, m=1, blow=np.inf):
    rng = np.random.default_rng(seed)
    z0 = rng.normal(size=(n, K + 1, 2 * d))
    zeta = rng.normal(size=(2, 200, d))
    kw = dict(spu=16, n_sub=2, n_units=3, eps0=0.05, gamma=1.0, delta=-1.0,
              amp=rng.random(m) * 0.2, rot=rng.random(m) * 3, cmap=np.ones((d, m)), blow=blow)
    return (z0, rng.random((n, m)), zeta, rng.integers(0, 2, n), rng.integers(0, 100, n)), kw


@needs_numba
@given(st.integers(0, 10_000), st.integers(-1, 2))
def test_backends_agree(seed, morder):
    args, kw = kernel_args(seed)
    a = _kernels.jet_flow(*args, matrix_order=morder, backend="numba", **kw)
    b = _kernels.jet_flow(*args, matrix_order=morder, backend="numpy", **kw)
    for x, y in zip(a[:2], b[:2]):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-12)
    assert np.array_equal(np.isnan(a[2]), np.isnan(b[2]))


@needs_numba
def test_backends_agree_on_blowup():
    args, kw = kernel_args(1, K=0, blow=5.0)
    args[0][:2] *= 20
    kw["delta"] = 1.0
    a = _kernels.jet_flow(*args, backend="numba", **kw)[2]
    b = _kernels.jet_flow(*args, backend="numpy", **kw)[2]
    assert np.isfinite(a[:2]).all()
    assert np.allclose(a, b, equal_nan=True)


@needs_numba
def test_expansion_backend_independent(forced_det, forced_params):
    fr = forced_det.frame
    lo, hi = pt.window_depths(1, fr.margins)
    w, _ = pt.ensemble_window(np.array([[0.3], [0.7]]), 2, 2, forced_params, lo, hi)
    a = pt.expand_orbits(w, forced_det.K0, fr, forced_params, 1, backend="numba")
    b = pt.expand_orbits(w, forced_det.K0, fr, forced_params, 1, backend="numpy")
    assert np.abs(a.at(1, 0) - b.at(1, 0)).max() < 1e-12


def test_horizon_checks():
    args, kw = kernel_args(0)
    z0, th, zeta, ridx, start = args
    with pytest.raises(IndexError):
        _kernels.jet_flow(z0, th, zeta, ridx, start + 150, **kw)
    with pytest.raises(IndexError):
        _kernels.jet_flow(z0, th, zeta, ridx, start - 200, **kw)


@pytest.mark.parametrize("value, expect", [("numpy", "numpy"), ("NumPy", "numpy")])
def test_env_flag_selects_backend(value, expect):
    env = dict(os.environ, NHTORI_BACKEND=value)
    r = subprocess.run([sys.executable, "-c", "from nhtori import _kernels; print(_kernels.BACKEND)"],
                       env=env, capture_output=True, text=True)
    assert r.stdout.strip() == expect


def test_env_flag_rejects_unknown():
    env = dict(os.environ, NHTORI_BACKEND="cuda")
    r = subprocess.run([sys.executable, "-c", "import nhtori._kernels"], env=env,
                       capture_output=True, text=True)
    assert r.returncode != 0 and "NHTORI_BACKEND" in r.stderr
