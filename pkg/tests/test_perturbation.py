import numpy as np
import pytest
from hypothesis import given, strategies as st

from nhtori import flow, perturbation as pt, torus_solver as ts
from nhtori.errors import CertificationError, DependencyError, NonHyperbolicError
from nhtori.fourier_torus import synthesize
from nhtori.noise import NoiseRealization, realization_seed, sample_path, wiener_shift

TOL = 1e-6


def const_rhs(val_S, val_U, n=3, J=200):
    return pt.CohomologicalRHS(np.full((n, J, 1), val_S), np.full((n, J, 1), val_U), first_depth=-100)


def const_lam(v, n=3, J=200):
    return np.full((n, J, 1, 1), float(v))


def test_constant_stable_oracle():
    rhs = const_rhs(1.0, 0.0)
    sol = pt.cohomological_solve(const_lam(0.5), const_lam(2.0), rhs, tol=1e-13)
    uS, _ = sol.at(0)
    assert np.abs(uS - 2.0).max() < 1e-12
    assert np.abs(0.5 * uS - sol.at(1)[0] + 1.0).max() < 1e-12


def test_constant_unstable_oracle():
    rhs = const_rhs(0.0, 1.0)
    sol = pt.cohomological_solve(const_lam(0.5), const_lam(2.0), rhs, tol=1e-13)
    _, uU = sol.at(0)
    assert np.abs(uU + 1.0).max() < 1e-12
    assert np.abs(2.0 * uU - sol.at(1)[1] + 1.0).max() < 1e-12


def test_zero_rhs_gives_zero():
    sol = pt.cohomological_solve(const_lam(0.5), const_lam(2.0), const_rhs(0.0, 0.0))
    assert np.array_equal(np.concatenate(sol.at(0), -1), np.zeros((3, 2)))
    assert sol.n_terms == (0, 0)


def test_printed_unstable_product_diverges_inverse_converges():
    lam = 2.0
    printed = [sum(lam ** (j + 1) for j in range(N)) for N in (5, 10, 20)]
    inverse = [sum(lam ** -(j + 1) for j in range(N)) for N in (5, 10, 20)]
    assert printed[-1] > 1e6
    assert abs(inverse[-1] - 1.0) < 1e-5


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 0.6), st.floats(1.5, 3.0))
def test_cohomological_residual_property(seed, ls, lu):
    rng = np.random.default_rng(seed)
    n, J = 3, 200
    lam_S = rng.uniform(-ls, ls, (n, J, 2, 2)) / 2
    lam_U = np.full((n, J, 1, 1), lu) * rng.choice([-1, 1], (n, J, 1, 1))
    rS, rU = rng.normal(size=(n, J, 2)), rng.normal(size=(n, J, 1))
    sol = pt.cohomological_solve(lam_S, lam_U, pt.CohomologicalRHS(rS, rU, -100), tol=1e-6)
    lo, hi = sol.valid
    for dpt in range(lo, hi):
        i = dpt + 100
        uS, uU = sol.at(dpt)
        nS, nU = sol.at(dpt + 1)
        eS = np.einsum("nab,nb->na", lam_S[:, i], uS) - nS + rS[:, i]
        eU = np.einsum("nab,nb->na", lam_U[:, i], uU) - nU + rU[:, i]
        assert np.abs(eS).max() < 1e-12 and np.abs(eU).max() < 1e-12
    # a shorter window agrees at depth 0 within the reported tails
    sub = slice(30, 170)
    short = pt.cohomological_solve(lam_S[:, sub], lam_U[:, sub],
                                   pt.CohomologicalRHS(rS[:, sub], rU[:, sub], -70), tol=1e-6)
    a, b = np.concatenate(sol.at(0), -1), np.concatenate(short.at(0), -1)
    assert np.abs(a - b).max() <= sol.tail_S + sol.tail_U + short.tail_S + short.tail_U


def test_uncertified_margins_and_short_window():
    with pytest.raises(NonHyperbolicError):
        pt.cohomological_solve(const_lam(1.2), const_lam(2.0), const_rhs(1.0, 1.0))
    with pytest.raises(CertificationError, match="window"):
        pt.cohomological_solve(const_lam(0.9, J=10), const_lam(1.1, J=10),
                               pt.CohomologicalRHS(np.ones((3, 10, 1)), np.ones((3, 10, 1)), -5),
                               need=(0, 0))


def test_rhs_validation():
    with pytest.raises(ValueError):
        pt.CohomologicalRHS(np.full((1, 3, 1), np.nan), np.zeros((1, 3, 1)))


def test_tail_terms():
    N = pt.tail_terms(0.5, 1.0, 1e-6)
    assert 0.5 ** (N + 1) * 2 <= 1e-6 < 0.5 ** N * 2


# ------------------------------------------------------------------ model expansions

@pytest.fixture(scope="module")
def forced_ex(forced_det, forced_params):
    fr = forced_det.frame
    need = pt.lambda_need(fr, TOL)
    lo, hi = pt.window_depths(2, fr.margins, need=need, tol=TOL)
    th = np.random.default_rng(0).random((16, 1))
    w, seeds = pt.ensemble_window(th, 123, 3, forced_params, lo, hi)
    return pt.expand_orbits(w, forced_det.K0, fr, forced_params, 2, tol=TOL, need=need)


def test_zero_path_gives_zero_coefficients(forced_det, forced_params):
    om = NoiseRealization.zeros(1 / 64, -150, 150, 1)
    th = np.array([[0.1], [0.6]])
    for k in (1, 2):
        assert np.abs(pt.compute_Kk(k, forced_det.K0, forced_det.frame, forced_params, om, th)).max() == 0.0


def test_defining_residuals(forced_ex, forced_params):
    for k in (1, 2):
        assert pt.kk_residual(forced_ex, k, forced_params).max() <= TOL


def test_K1_linear_in_path(forced_det, forced_params):
    fr = forced_det.frame
    lo, hi = pt.window_depths(1, fr.margins, tol=TOL)
    om = pt.orbit_noise(5, lo, hi, 1)
    th = np.random.default_rng(1).random((8, 1))
    K1 = pt.compute_Kk(1, forced_det.K0, fr, forced_params, om, th)
    K1c = pt.compute_Kk(1, forced_det.K0, fr, forced_params, om.scaled(2.5), th)
    assert np.abs(K1c - 2.5 * K1).max() < 1e-8


def test_K1_frame_independent(forced_det, forced_params):
    fr = forced_det.frame
    fr2 = ts.rescale_frame(fr, np.diag([0.5, 3.0]), forced_det.K0, forced_params)
    lo, hi = pt.window_depths(1, fr.margins, tol=1e-10)
    om = pt.orbit_noise(6, lo, hi, 1)
    th = np.random.default_rng(2).random((8, 1))
    a = pt.compute_Kk(1, forced_det.K0, fr, forced_params, om, th, tol=1e-10)
    b = pt.compute_Kk(1, forced_det.K0, fr2, forced_params, om, th, tol=1e-10)
    assert np.abs(a - b).max() < 1e-8


def test_K1_shift_equivariance(forced_det, forced_params):
    fr = forced_det.frame
    om = sample_path(7, 1 / 64, -150, 150, 1)
    th = np.random.default_rng(3).random((6, 1))
    lo, hi = pt.window_depths(1, fr.margins, tol=TOL, need=(0, 2))
    w = pt.make_window(th, [om], forced_params, lo, hi)
    ex = pt.expand_orbits(w, forced_det.K0, fr, forced_params, 1, tol=TOL, need=(0, 2))
    shifted = wiener_shift(om, 1.0)
    direct = pt.compute_Kk(1, forced_det.K0, fr, forced_params, shifted,
                           np.mod(th + forced_params.rotation, 1.0))
    assert np.abs(direct - ex.at(1, 1)).max() < 1e-5


def test_E_matches_differences_of_variational_matrix(forced_ex, forced_det, forced_params):
    """E = P0^{-1}(next) d/deps M(K0 + eps K1, eps) P0 at depth 0."""
    p = forced_params
    E, M0, (lo, _) = pt.frame_matrices_E(forced_ex, p)
    w = forced_ex.window
    i = 0
    K0, K1 = forced_ex.at(0, 0)[i], forced_ex.at(1, 0)[i]
    seeds = [realization_seed(123, j) for j in range(3)]
    om = pt.orbit_noise(seeds[w.ridx[i]], w.lo, w.hi, 1)
    th = w.theta[i]
    e = 1e-5
    Mp = flow.variational_matrix(K0 + e * K1, th, om, e, p)
    Mm = flow.variational_matrix(K0 - e * K1, th, om, -e, p)
    dM = (Mp - Mm) / (2 * e)
    P = forced_det.frame.P(th)
    Pn = forced_det.frame.P(np.mod(th + p.rotation, 1.0))
    assert np.abs(np.linalg.solve(Pn, dM @ P) - E[i, 0 - lo]).max() < 1e-6


def test_lambda1_structure_and_residual(forced_ex, forced_det, forced_params):
    fo = pt.lambda_first_order(forced_ex, forced_det.frame, forced_params, tol=TOL)
    s = forced_det.frame.d_S
    L1 = fo.Lambda1
    assert np.all(L1[..., :s, s:] == 0) and np.all(L1[..., s:, :s] == 0)
    assert pt.reducibility_residual(fo, forced_ex, 0).max() <= 1e-7
    assert np.all(fo.at("Q1", 0)[..., :s, :s] == 0) and np.all(fo.at("Q1", 0)[..., s:, s:] == 0)


def test_lambda1_zero_path(forced_det, forced_params):
    fr = forced_det.frame
    need = pt.lambda_need(fr, TOL)
    lo, hi = pt.window_depths(1, fr.margins, need=need, tol=TOL)
    om = NoiseRealization.zeros(1 / 64, lo - 2, hi + 3, 1)
    w = pt.make_window(np.array([[0.2], [0.7]]), [om], forced_params, lo, hi)
    ex = pt.expand_orbits(w, forced_det.K0, fr, forced_params, 1, tol=TOL, need=need)
    fo = pt.lambda_first_order(ex, fr, forced_params, tol=TOL)
    assert np.abs(fo.E).max() == 0.0 and np.abs(fo.Lambda1).max() == 0.0
    assert np.nanmax(np.abs(fo.Q1)) == 0.0


def test_lambda1_needs_K1(forced_det, forced_params):
    fr = forced_det.frame
    lo, hi = pt.window_depths(1, fr.margins, tol=TOL)
    w = pt.make_window(np.array([[0.2]]), [pt.orbit_noise(1, lo, hi, 1)], forced_params, lo, hi)
    ex = pt.expand_orbits(w, forced_det.K0, fr, forced_params, 0)
    with pytest.raises(DependencyError):
        pt.lambda_first_order(ex, fr, forced_params)


def test_expansion_defect_scaling(forced_det, forced_params):
    fr = forced_det.frame
    lo, hi = pt.window_depths(1, fr.margins, tol=1e-9, need=(0, 1))
    th = np.random.default_rng(4).random((4, 1))
    w, _ = pt.ensemble_window(th, 77, 20, forced_params, lo, hi)
    ex = pt.expand_orbits(w, forced_det.K0, fr, forced_params, 1, tol=1e-9)
    grid = [0.1, 0.05, 0.025]
    _, s0 = pt.expansion_defect(ex, forced_params, grid, order=0)
    _, s1 = pt.expansion_defect(ex, forced_params, grid, order=1)
    assert 0.8 <= s0 <= 1.3
    assert 1.7 <= s1 <= 2.4
    d0, _ = pt.expansion_defect(ex, forced_params, [0.0], order=1)
    assert d0.max() <= 1e-9


def test_bundle_matches_pointwise(forced_det, forced_params):
    fr = forced_det.frame
    need = pt.lambda_need(fr, TOL)
    lo, hi = pt.window_depths(1, fr.margins, need=need, tol=TOL)
    om = pt.orbit_noise(9, lo, hi, 1)
    b = pt.build_bundle(forced_det.K0, fr, forced_params, om, 1)
    th = np.array([[0.31], [0.82]])
    direct = pt.compute_Kk(1, forced_det.K0, fr, forced_params, om, th)
    assert np.abs(synthesize(b.K[1], th) - direct).max() < 1e-5
    assert b.Lambda1 is not None and max(b.residuals) <= TOL
    short = sample_path(9, 1 / 64, -3, 3, 1)
    with pytest.raises(DependencyError):
        pt.build_bundle(forced_det.K0, fr, forced_params, short, 1)


def test_window_needs_horizon(forced_params):
    with pytest.raises(DependencyError):
        pt.make_window(np.zeros((1, 1)), [sample_path(1, 1 / 64, -2, 2, 1)], forced_params, -10, 5)
