import numpy as np
import pytest
from scipy.integrate import quad_vec
from scipy.linalg import expm

from nhtori import torus_solver as ts
from nhtori.errors import CertificationError, DivergenceError, NonHyperbolicError
from nhtori.fourier_torus import FourierTorus, TorusGrid, analyze, synthesize
from nhtori.model import ModelParams

from conftest import GOLDEN

A_REF = np.array([[0.0, 1.0], [1.0, -1.0]])
LAM_MINUS, LAM_PLUS = (-1 - np.sqrt(5)) / 2, (-1 + np.sqrt(5)) / 2


def test_unforced_K0_is_origin(ref_det):
    assert np.abs(ref_det.K0.coeffs).max() == 0.0
    assert ref_det.residual < 1e-12


def test_unforced_Lambda0_matches_quadratic_oracle(ref_det):
    fr = ref_det.frame
    lam = fr.Lam(np.array([[0.0], [0.31], [0.77]]))
    want = np.diag([np.exp(LAM_MINUS), np.exp(LAM_PLUS)])
    assert np.abs(lam - want).max() < 1e-4
    # the rounded values quoted for this problem
    assert lam[0, 0, 0] == pytest.approx(0.1983, abs=1e-4)
    assert np.exp(LAM_PLUS) == pytest.approx(1.85528, abs=1e-5)
    assert (fr.d_S, fr.d_U) == (1, 1)
    assert fr.residual <= 1e-9


def test_unforced_margins_and_cH(ref_det):
    lS, lU, cH = ts.hyperbolicity_margin(ref_det.frame)
    assert lS == pytest.approx(np.exp(LAM_MINUS), abs=1e-4)
    assert lU == pytest.approx(np.exp(-LAM_PLUS), abs=1e-4)
    assert np.isfinite(cH) and cH <= 4.5
    w, V = np.linalg.eig(expm(A_REF))
    bound = np.linalg.cond(V) * (1 / (1 - lS) + lU / (1 - lU) + 1)
    assert cH == pytest.approx(bound, rel=1e-6)


def test_linear_forced_oracle():
    a = 0.1
    p = ModelParams(d=1, m=1, gamma=1.0, delta=0.0, amp=[a], alpha=[GOLDEN])
    det = ts.solve_K0(p, modes=(8,), tol_inv=1e-12, n_sub=2)
    rot = p.rotation[0]
    eA = expm(A_REF)
    # c(theta) = (0, -a sin 2 pi theta): mode k = 1 carries (0, -a / 2i)
    c1 = np.array([0.0, -a / 2j])
    g1, _ = quad_vec(lambda s: expm(A_REF * (1 - s)) @ (c1 * np.exp(2j * np.pi * rot * s)), 0, 1,
                     epsabs=1e-14)
    K1 = np.linalg.solve(np.exp(2j * np.pi * rot) * np.eye(2) - eA, g1)
    assert np.abs(det.K0.coeff(1) - K1).max() < 1e-8
    assert np.abs(det.K0.coeff(-1) - np.conj(K1)).max() < 1e-8
    others = np.delete(det.K0.coeffs, [7, 9], axis=0)
    assert np.abs(others).max() < 1e-8


def test_newton_quadratic_convergence(forced_det):
    r = np.array(forced_det.history)
    assert r[-1] <= 1e-10
    for a, b in zip(r, r[1:]):
        if a < 1e-3 and b > 1e-13:
            assert b <= 50 * a * a


def test_forced_frame_residual(forced_det):
    fr = forced_det.frame
    assert fr.certified and fr.residual <= 1e-9
    assert fr.cond < 1e6


def test_invariance_residuals(ref_params, ref_det):
    assert ts.invariance_residual(ref_det.K0, ref_params) == 0.0
    g = TorusGrid((32,))
    th = g.nodes()[:, 0]
    bump = np.stack([1e-3 * np.cos(2 * np.pi * th), np.zeros_like(th)], -1)
    K = analyze(bump, (8,), g)
    r = ts.invariance_residual(K, ref_params)
    assert 2e-4 <= r <= 5e-3


def test_forced_invariance(forced_params, forced_det):
    assert ts.invariance_residual(forced_det.K0, forced_params) <= 1e-9


def test_stable_margin_bounds_power_iteration(forced_det, forced_params):
    fr = forced_det.frame
    lS, lU, _ = ts.hyperbolicity_margin(fr)
    s = fr.d_S
    prod = np.eye(s)
    for j in range(50):
        prod = fr.Lam(np.mod(j * forced_params.rotation, 1.0))[:s, :s] @ prod
    rho = np.abs(np.linalg.eigvals(prod)).max() ** (1 / 50)
    assert lS >= rho


def test_rescaling_leaves_margins(forced_det, forced_params):
    fr = forced_det.frame
    fr2 = ts.rescale_frame(fr, 2.0 * np.eye(2), forced_det.K0, forced_params)
    assert np.allclose(ts.hyperbolicity_margin(fr2)[:2], ts.hyperbolicity_margin(fr)[:2], atol=1e-12)


def test_frame_similarity_cocycle_spectrum(forced_det, forced_params):
    fr = forced_det.frame
    S = np.diag([0.5, 3.0])
    fr2 = ts.rescale_frame(fr, S, forced_det.K0, forced_params)
    th = np.array([0.123])
    a = ts.cocycle_product_spectrum(fr, th, forced_params.rotation, 10)
    b = ts.cocycle_product_spectrum(fr2, th, forced_params.rotation, 10)
    # moduli span ~1e-7..5e2; compare relative to the spectral radius
    assert np.abs(a - b).max() <= 1e-10 * a.max()


def test_contraction_of_stable_block(forced_det, forced_params):
    fr = forced_det.frame
    lS = ts.hyperbolicity_margin(fr)[0]
    v = np.ones(fr.d_S)
    for j in range(30):
        v = fr.Lam(np.mod(j * forced_params.rotation, 1.0))[:fr.d_S, :fr.d_S] @ v
    assert np.linalg.norm(v) <= lS**30 * (1 - 1e-6) or np.linalg.norm(v) <= lS**30


def test_non_hyperbolic_matrix_rejected():
    R = np.array([[np.cos(0.3), -np.sin(0.3)], [np.sin(0.3), np.cos(0.3)]])
    with pytest.raises(NonHyperbolicError):
        ts._split_schur(R)


def test_newton_budget_exhausted(forced_params):
    with pytest.raises(DivergenceError):
        ts.solve_K0(forced_params, modes=(16,), tol_inv=1e-14, max_newton=1)


def test_tail_violation():
    c = np.zeros((7, 2), complex)
    c[3] = 1.0
    c[0] = c[6] = 1e-3
    with pytest.raises(CertificationError):
        ts._check_tail(FourierTorus(c, (3,)), "K0")


def test_underresolved_forcing_refuses_certification():
    p = ModelParams(d=1, m=1, gamma=1.0, delta=-1.0, amp=[0.6], alpha=[GOLDEN])
    with pytest.raises(CertificationError):
        ts.solve_K0(p, modes=(2,))
