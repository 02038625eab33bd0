import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from nhtori.errors import ConfigError
from nhtori.fourier_torus import (FourierTorus, TorusGrid, analyze, derivative, on_grid,
                                  read_torus, resample_modes, rotate, synthesize, write_torus)


def random_poly(rng, modes, d_out=2):
    """Real trigonometric polynomial with the given mode box."""
    shape = tuple(2 * n + 1 for n in modes) + (d_out,)
    c = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    c = 0.5 * (c + np.conj(c[tuple([slice(None, None, -1)] * len(modes))]))
    return FourierTorus(c, modes)


def direct_sum(t, theta):
    out = np.zeros(t.d_out)
    for idx in np.ndindex(t.coeffs.shape[:-1]):
        k = np.array(idx) - np.array(t.modes)
        out = out + (t.coeffs[idx] * np.exp(2j * np.pi * k @ theta)).real
    return out


def test_constant_analyzes_to_unit_mean():
    g = TorusGrid((12,))
    t = analyze(np.ones(12), (3,), g)
    assert t.coeff(0)[0] == pytest.approx(1.0, abs=1e-15)
    rest = np.delete(t.coeffs[:, 0], 3)
    assert np.abs(rest).max() < 1e-15


def test_cosine_coefficients():
    g = TorusGrid((16,))
    th = g.nodes()[:, 0]
    t = analyze(np.cos(2 * np.pi * th), (4,), g)
    assert t.coeff(1)[0] == pytest.approx(0.5, abs=1e-15)
    assert t.coeff(-1)[0] == pytest.approx(0.5, abs=1e-15)
    mask = np.ones(9, bool)
    mask[[3, 5]] = False
    assert np.abs(t.coeffs[mask]).max() < 1e-15


def test_generate_then_recover_degree3():
    rng = np.random.default_rng(0)
    t = random_poly(rng, (3,))
    g = TorusGrid((16,))
    back = analyze(on_grid(t, g), (3,), g)
    assert np.abs(back.coeffs - t.coeffs).max() < 1e-12


def test_synthesize_constant_and_cosine_zero():
    t = FourierTorus.constant([2.5, -1.0], (3,))
    assert np.allclose(synthesize(t, [0.37]), [2.5, -1.0], atol=1e-15)
    g = TorusGrid((8,))
    cos = analyze(np.cos(2 * np.pi * g.nodes()[:, 0]), (2,), g)
    assert abs(synthesize(cos, [0.25])[0]) <= 1e-12


def test_synthesize_matches_direct_summation():
    rng = np.random.default_rng(1)
    t = random_poly(rng, (3, 2))
    th = rng.random((100, 2))
    vals = synthesize(t, th)
    ref = np.array([direct_sum(t, x) for x in th])
    assert np.abs(vals - ref).max() < 1e-12


def test_grid_node_evaluation_matches_grid_values():
    rng = np.random.default_rng(2)
    t = random_poly(rng, (4, 3))
    g = TorusGrid.for_modes(t.modes)
    vals = on_grid(t, g).reshape(g.size, -1)
    assert np.abs(synthesize(t, g.nodes()) - vals).max() < 1e-12


def test_rotation_examples():
    g = TorusGrid((16,))
    th = g.nodes()
    cos = analyze(np.cos(2 * np.pi * th[:, 0]), (3,), g)
    assert np.array_equal(rotate(cos, [0.0]).coeffs, cos.coeffs)
    q = rotate(cos, [0.25])
    pts = np.random.default_rng(3).random((50, 1))
    assert np.abs(synthesize(q, pts)[:, 0] + np.sin(2 * np.pi * pts[:, 0])).max() < 1e-12
    rng = np.random.default_rng(4)
    t = random_poly(rng, (5,))
    a = rng.random(1)
    assert np.abs(rotate(rotate(t, a), -a).coeffs - t.coeffs).max() < 1e-14


def test_rotation_is_shift_of_argument():
    rng = np.random.default_rng(5)
    t = random_poly(rng, (4, 2))
    a = rng.random(2)
    pts = rng.random((30, 2))
    assert np.abs(synthesize(rotate(t, a), pts) - synthesize(t, pts + a)).max() < 1e-12


@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_rotation_composition(seed, a1, a2):
    t = random_poly(np.random.default_rng(seed), (4,))
    lhs = rotate(t, [a1 + a2]).coeffs
    rhs = rotate(rotate(t, [a1]), [a2]).coeffs
    assert np.abs(lhs - rhs).max() <= 1e-13 * max(1.0, np.abs(t.coeffs).max())


@given(st.integers(0, 2**32 - 1), st.integers(1, 2), st.integers(0, 5))
def test_round_trip_and_hermitian(seed, m, n):
    rng = np.random.default_rng(seed)
    modes = (n,) * m
    g = TorusGrid.for_modes(modes)
    vals = rng.normal(size=g.shape + (2,))
    t = analyze(vals, modes, g)
    flip = np.conj(t.coeffs[tuple([slice(None, None, -1)] * m)])
    assert np.array_equal(t.coeffs, flip)
    back = analyze(on_grid(t, g), modes, g)
    assert np.abs(back.coeffs - t.coeffs).max() <= 1e-12


@given(st.integers(0, 2**32 - 1))
def test_sup_norm_subadditive(seed):
    rng = np.random.default_rng(seed)
    a, b = random_poly(rng, (3,)), random_poly(rng, (3,))
    assert (a + b).sup_norm() <= a.sup_norm() + b.sup_norm() + 1e-12


def test_derivative_of_sine():
    g = TorusGrid((16,))
    s = analyze(np.sin(2 * np.pi * g.nodes()[:, 0]), (3,), g)
    pts = np.linspace(0, 1, 11)[:, None]
    assert np.allclose(synthesize(derivative(s), pts)[:, 0], 2 * np.pi * np.cos(2 * np.pi * pts[:, 0]),
                       atol=1e-12)


def test_resample_pads_and_truncates():
    t = random_poly(np.random.default_rng(6), (3,))
    big = resample_modes(t, (6,))
    pts = np.random.default_rng(7).random((10, 1))
    assert np.allclose(synthesize(big, pts), synthesize(t, pts), atol=1e-13)
    assert np.allclose(resample_modes(big, (3,)).coeffs, t.coeffs)


def test_tail_diagnostic():
    t = random_poly(np.random.default_rng(8), (3,))
    assert t.tail() == pytest.approx(np.abs(t.coeffs[[0, -1]]).max())
    assert FourierTorus.zeros((3,), 2).tail_ratio() == 0.0


def test_non_finite_input_names_node():
    vals = np.zeros((8, 2))
    vals[5, 1] = np.nan
    with pytest.raises(ValueError, match=r"\(5,\)"):
        analyze(vals, (2,))


def test_aliasing_rejected():
    with pytest.raises(ConfigError):
        analyze(np.zeros(8), (5,))
    with pytest.raises(ConfigError):
        TorusGrid((7,))


def test_file_round_trip_bit_faithful(tmp_path):
    t = random_poly(np.random.default_rng(9), (3, 2), d_out=4)
    p = tmp_path / "t.torus"
    write_torus(p, t)
    back = read_torus(p)
    assert back.modes == t.modes
    assert np.array_equal(back.coeffs, t.coeffs)
    lines = p.read_text().splitlines()
    assert lines[0] == "2 4" and lines[1] == "3 2"
    assert len(lines) == 2 + 7 * 5 * 4
