import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import fsolve

from nhtori.errors import ConfigError
from nhtori.model import (ModelParams, cutoff, drift, forcing_E, jacobian_drift, lyapunov_H,
                          potential)


def mp(**kw):
    base = dict(d=1, m=1, gamma=1.0, delta=-1.0, amp=[0.0], alpha=[2.0])
    base.update(kw)
    return ModelParams(**base)


def test_forcing_examples():
    assert forcing_E([0.0], mp(amp=[1.0]))[0] == 0.0
    assert forcing_E([0.25], mp(amp=[1.0]))[0] == pytest.approx(1.0, abs=1e-15)
    p2 = mp(m=2, amp=[1.0, 1.0], alpha=[2.0, 2.0 * np.sqrt(2)], beta=[0.0, 0.0])
    assert forcing_E([0.25, 1 / 12], p2)[0] == pytest.approx(1.5, abs=1e-14)


def test_drift_examples():
    p = mp()
    assert np.array_equal(drift([0.0, 0.0], [0.0], p), [0.0, 0.0])
    assert np.allclose(drift([2.0, 0.0], [0.0], p), [0.0, -6.0])
    # E = 1 at theta = 0.25 with unit amplitude
    assert np.allclose(drift([1.0, 1.0], [0.25], mp(amp=[1.0])), [1.0, -1.0], atol=1e-14)


def test_jacobian_examples():
    p = mp()
    assert np.allclose(jacobian_drift([0.0, 0.3], [0.0], p), [[0, 1], [1, -1]])
    assert np.allclose(jacobian_drift([1.0, 0.3], [0.0], p), [[0, 1], [-2, -1]])


def test_jacobian_vs_central_differences():
    rng = np.random.default_rng(0)
    p = mp(d=2, m=2, amp=[0.3, 0.2], alpha=[1.0, np.sqrt(2)], beta=[0.0, 0.5])
    z = rng.normal(size=(20, 4))
    th = rng.random((20, 2))
    h = 1e-5
    fd = np.stack([(drift(z + h * e, th, p) - drift(z - h * e, th, p)) / (2 * h) for e in np.eye(4)], -1)
    assert np.abs(jacobian_drift(z, th, p) - fd).max() < 1e-6


def test_jacobian_richardson_slope():
    p = mp(amp=[0.4])
    z, th = np.array([0.7, -0.2]), np.array([0.3])
    J = jacobian_drift(z, th, p)
    errs = []
    for h in (1e-2, 5e-3, 2.5e-3):
        fd = np.stack([(drift(z + h * e, th, p) - drift(z - h * e, th, p)) / (2 * h) for e in np.eye(2)], -1)
        errs.append(np.abs(fd - J).max())
    slope = np.polyfit(np.log([1e-2, 5e-3, 2.5e-3]), np.log(errs), 1)[0]
    assert slope >= 1.9


@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_B_has_zero_position_block(seed, d):
    rng = np.random.default_rng(seed)
    p = mp(d=d, m=1, amp=[0.5])
    z = rng.normal(size=(10, 2 * d)) * 3
    th = rng.random((10, 1))
    B = drift(z, th, p) - z @ p.A.T
    assert np.all(B[:, :d] == 0)


@given(st.integers(0, 2**32 - 1))
def test_cut_agrees_inside_radius(seed):
    rng = np.random.default_rng(seed)
    p = mp(n_cut=3.0, amp=[0.5])
    z = rng.uniform(-2.4, 2.4, size=(20, 2))   # |x - E| <= 2.9, |v| <= 2.4
    th = rng.random((20, 1))
    assert np.array_equal(drift(z, th, p, cut=True), drift(z, th, p))
    assert np.array_equal(jacobian_drift(z, th, p, cut=True), jacobian_drift(z, th, p))


def test_cut_jacobian_matches_differences():
    p = mp(n_cut=1.0, amp=[0.2])
    rng = np.random.default_rng(1)
    z = rng.uniform(-2.5, 2.5, size=(20, 2))
    th = rng.random((20, 1))
    h = 1e-6
    fd = np.stack([(drift(z + h * e, th, p, True) - drift(z - h * e, th, p, True)) / (2 * h)
                   for e in np.eye(2)], -1)
    assert np.abs(jacobian_drift(z, th, p, cut=True) - fd).max() < 1e-5


def test_cutoff_profile():
    chi, _, _ = cutoff(np.array([0.0, 1.0, 1.5, 2.0, 3.0]), 1.0)
    assert chi[0] == chi[1] == 1.0 and chi[3] == chi[4] == 0.0 and 0 < chi[2] < 1


def test_cut_without_radius_is_config_error():
    with pytest.raises(ConfigError):
        drift([0.0, 0.0], [0.0], mp(), cut=True)


def test_equilibria_of_unforced_double_well():
    p = mp()
    roots = set()
    for x0 in np.linspace(-2, 2, 21):
        for v0 in (-0.5, 0.0, 0.5):
            r, info, ok, _ = fsolve(lambda z: drift(z, [0.0], p), [x0, v0], full_output=True, xtol=1e-14)
            if ok == 1 and np.abs(drift(r, [0.0], p)).max() < 1e-12:
                roots.add((round(r[0], 8) + 0.0, round(r[1], 8) + 0.0))
    assert roots == {(0.0, 0.0), (1.0, 0.0), (-1.0, 0.0)}


def test_lyapunov_H_examples():
    p = mp()
    assert lyapunov_H([0.0, 0.0], [0.0], p, 1.0) == pytest.approx(1.0)
    assert lyapunov_H([1.0, 0.0], [0.0], p, 1.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        lyapunov_H([0.0, 0.0], [0.0], p, 0.2)


def test_lyapunov_H_lower_bound():
    rng = np.random.default_rng(2)
    for gamma in (0.5, 1.0, 2.0):
        p = mp(gamma=gamma)
        z = rng.normal(size=(1000, 2)) * 3
        H = lyapunov_H(z, np.zeros((1000, 1)), p, 0.25 + 1e-9)
        bound = z[:, 1] ** 2 / 8 + gamma**2 * z[:, 0] ** 2 / 12
        assert np.all(H > bound)


def test_potential_minimum():
    y = np.linspace(-3, 3, 6001)[:, None]
    assert potential(y, -1.0).min() == pytest.approx(-0.25, abs=1e-9)


def test_parameter_validation():
    with pytest.raises(ConfigError):
        mp(gamma=-1.0)
    with pytest.raises(ConfigError):
        mp(amp=[0.1, 0.2])


def test_resonance_warning():
    with pytest.warns(RuntimeWarning, match=r"p=\(-2, 1\)|p=\(2, -1\)"):
        mp(m=2, amp=[0.0, 0.0], alpha=[1.0, 2.0], beta=[0.0, 0.0])
