import json
import warnings

import numpy as np
import pytest

from quasijac.errors import SingularVarianceError
from quasijac.ics import singular_values_sorted
from quasijac.inference import fd_jacobian
from quasijac.levelset import LevelSetSample, compute_bandwidth, screen_grid
from quasijac.models import DgpSpec, MomentModel, ParameterSpace, simulate
from quasijac.qjac import QuasiJacobian, fit_ls, fit_supnorm, normalized_matrix, sandwich_variance

# Largest trace(B Sigma B') / kappa^2 over 90 NLS fixtures (c in {0, 2, 10}) was 0.53; frozen with margin.
TRACE_CONSTANT_NLS = 1.0


def _linear_problem(seed, d_theta=1, k=None):
    spec = DgpSpec("linear_iv", 500, seed=seed, options={"d_theta": d_theta, "n_instruments": k or d_theta})
    model, data = simulate(spec)
    truth = model.true_theta(spec)
    space = ParameterSpace(truth - 1, truth + 1, (0,), tuple(range(1, d_theta))) if d_theta > 1 else ParameterSpace(truth - 1, truth + 1, (0,), ())
    return model, data, space


def _sample_from(draws, gbar, vhat=None, weights=None, kappa=1.0):
    B = draws.shape[0]
    vhat = np.tile(np.eye(gbar.shape[1]), (B, 1, 1)) if vhat is None else vhat
    w = np.full(B, 1.0 / B) if weights is None else weights / weights.sum()
    return LevelSetSample(draws, np.zeros(B), w, gbar, vhat, kappa, 0.0)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("kappa", [0.3, 0.5, 50.0])
def test_linear_slope_exact(seed, kappa):
    model, data, space = _linear_problem(seed, 2, 3)
    s = screen_grid(model, data, space, 512, kappa, seed=seed)
    qj = fit_ls(s)
    np.testing.assert_allclose(qj.slope_B, model.slope(data), rtol=0, atol=1e-10)


def test_constant_moments_give_zero_slope():
    rng = np.random.default_rng(0)
    draws = rng.uniform(-1, 1, (50, 2))
    m = np.array([0.3, -2.0])
    qj = fit_ls(_sample_from(draws, np.tile(m, (50, 1))))
    np.testing.assert_allclose(qj.intercept_A, m, atol=1e-12)
    np.testing.assert_allclose(qj.slope_B, 0, atol=1e-12)


def test_normal_equation_identity_and_residual_bound(nls_strong):
    model, data, space, _ = nls_strong
    s = screen_grid(model, data, space, 10000, compute_bandwidth(1000), seed=1)
    qj = fit_ls(s)
    np.testing.assert_allclose(qj.intercept_A + qj.slope_B @ qj.theta_bar, s.weights @ s.gbar, atol=1e-10 * np.abs(s.gbar).max())
    resid = s.gbar - qj.intercept_A - s.draws @ qj.slope_B.T
    assert s.weights @ np.sum(resid**2, axis=1) <= s.weights @ np.sum(s.gbar**2, axis=1)
    assert np.all(np.linalg.eigvalsh(qj.sigma_n) >= -1e-15)
    np.testing.assert_allclose(qj.vbar, np.einsum("b,bij->ij", s.weights, s.vhat))


def test_sigma_is_weighted_covariance_without_correction():
    draws = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
    qj = fit_ls(_sample_from(draws, draws @ np.array([[1.0, 0.0], [0.0, 1.0]])))
    np.testing.assert_allclose(qj.theta_bar, [1, 1])
    np.testing.assert_allclose(qj.sigma_n, np.eye(2))


@pytest.mark.parametrize("c, seed", [(0.0, 3), (2.0, 4), (10.0, 5)])
def test_trace_bound(c, seed):
    spec = DgpSpec("nls_weak", 1000, c=c, seed=seed)
    model, data = simulate(spec)
    t0 = model.true_theta(spec)
    kappa = compute_bandwidth(1000)
    s = screen_grid(model, data, ParameterSpace(t0 - 1, t0 + 1, (0,), (1,)), 10000, kappa, seed=seed)
    qj = fit_ls(s)
    assert np.trace(qj.slope_B @ qj.sigma_n @ qj.slope_B.T) <= TRACE_CONSTANT_NLS * kappa**2


def jacobian_relative_error(sample, model, data) -> float:
    """Frobenius error of the LS slope against the central-difference Jacobian, in J'J-normalized units."""
    B = fit_ls(sample).slope_B
    J = fd_jacobian(model, data, sample.theta_min)
    evals, evecs = np.linalg.eigh(J.T @ J)
    H = (evecs / np.sqrt(evals)) @ evecs.T
    return float(np.linalg.norm((B - J) @ H) / np.linalg.norm(J @ H))


def test_strong_id_slope_close_to_jacobian(nls_strong):
    # Known red at c=10: the level set bends along theta1*theta2 = const (see the decisions ledger).
    model, data, space, _ = nls_strong
    s = screen_grid(model, data, space, 10000, compute_bandwidth(1000), seed=2)
    assert jacobian_relative_error(s, model, data) <= 0.1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_very_strong_id_slope_close_to_jacobian(seed):
    spec = DgpSpec("nls_weak", 1000, c=30.0, seed=seed)
    model, data = simulate(spec)
    t0 = model.true_theta(spec)
    s = screen_grid(model, data, ParameterSpace(t0 - 1, t0 + 1, (0,), (1,)), 10000, compute_bandwidth(1000), seed=seed)
    assert jacobian_relative_error(s, model, data) <= 0.1


def test_supnorm_linear_exact():
    model, data, space = _linear_problem(7, 2, 3)
    s = screen_grid(model, data, space, 512, 0.5, seed=7)
    fit = fit_supnorm(s)
    assert fit.minimax <= 1e-8
    np.testing.assert_allclose(fit.slope, model.slope(data), atol=1e-8)


def test_supnorm_symmetric_quadratic():
    # Chebyshev line for t^2 on a symmetric grid of [-1, 1]: equioscillation at -1, 0, 1 gives slope 0,
    # intercept 1/2 and minimax 1/2 (enumerated by hand); least squares also has slope 0 by symmetry.
    t = np.linspace(-1, 1, 41)[:, None]
    s = _sample_from(t, t**2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fit = fit_supnorm(s, max_iter=2000, tol=1e-10)
    ls = fit_ls(s)
    assert fit.slope[0, 0] == pytest.approx(0.0, abs=1e-6)
    assert ls.slope_B[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert fit.intercept[0] == pytest.approx(0.5, abs=1e-4)
    assert fit.minimax == pytest.approx(0.5, abs=1e-4)


def test_supnorm_close_to_ls_under_strong_id(nls_strong):
    model, data, space, _ = nls_strong
    s = screen_grid(model, data, space, 10000, compute_bandwidth(1000), seed=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fit = fit_supnorm(s)
    B = fit_ls(s).slope_B
    assert np.linalg.norm(fit.slope - B) / np.linalg.norm(B) <= 0.15


def test_supnorm_nonconvergence_flag():
    rng = np.random.default_rng(1)
    t = rng.uniform(-1, 1, (200, 1))
    s = _sample_from(t, np.sin(5 * t))
    with pytest.warns(RuntimeWarning):
        fit = fit_supnorm(s, max_iter=2)
    assert not fit.converged and np.isfinite(fit.minimax)


def _qj(B, sigma, vbar):
    d_g, d = B.shape
    return QuasiJacobian(np.zeros(d_g), B, np.zeros(d), sigma, vbar, 0.1, 100)


def test_normalized_matrix_examples():
    full = ParameterSpace([0, 0], [1, 1], (0, 1), ())
    half = ParameterSpace([0, 0], [1, 1], (0,), (1,))
    rng = np.random.default_rng(0)
    B = rng.standard_normal((2, 2))
    np.testing.assert_array_equal(normalized_matrix(_qj(B, np.eye(2), np.eye(2)), full), 0)
    np.testing.assert_array_equal(normalized_matrix(_qj(np.zeros((2, 2)), np.diag([2.0, 3.0]), np.diag([5.0, 1.0])), half), 0)
    np.testing.assert_allclose(normalized_matrix(_qj(np.eye(2), np.eye(2), np.eye(2)), half), [[0, 0], [0, 1]])


def test_normalized_matrix_unnormalized_variant():
    half = ParameterSpace([0, 0], [1, 1], (0,), (1,))
    M = normalized_matrix(_qj(np.eye(2), np.diag([4.0, 4.0]), np.eye(2)), half, normalize_sigma=False)
    np.testing.assert_allclose(M, [[0, 0], [0, 1]])


def test_moment_rescaling_invariance(nls_strong):
    model, data, space, _ = nls_strong
    s = screen_grid(model, data, space, 10000, compute_bandwidth(1000), seed=4)
    C = np.array([[2.0, 0.5], [-1.0, 3.0]])
    s2 = _sample_from(s.draws, s.gbar @ C.T, np.einsum("ij,bjk,lk->bil", C, s.vhat, C), s.weights)
    a = singular_values_sorted(normalized_matrix(fit_ls(s), space))
    b = singular_values_sorted(normalized_matrix(fit_ls(s2), space))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-8)


def test_nuisance_permutation_invariance():
    model, data, _ = _linear_problem(3, 3, 4)
    truth = np.ones(3)
    space = ParameterSpace(truth - 1, truth + 1, (0,), (1, 2))
    s = screen_grid(model, data, space, 2048, 0.3, seed=5)
    perm = [0, 2, 1]
    sp = _sample_from(s.draws[:, perm], s.gbar, s.vhat, s.weights)
    qa, qb = fit_ls(s), fit_ls(sp)
    np.testing.assert_allclose(qb.slope_B, qa.slope_B[:, perm], atol=1e-10)
    np.testing.assert_allclose(qb.sigma_n, qa.sigma_n[np.ix_(perm, perm)], atol=1e-14)
    a = singular_values_sorted(normalized_matrix(qa, space))
    b = singular_values_sorted(normalized_matrix(qb, space))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_sandwich_reductions():
    rng = np.random.default_rng(2)
    B = rng.standard_normal((2, 2))
    V = np.array([[2.0, 0.3], [0.3, 1.0]])
    W = np.linalg.inv(V)
    np.testing.assert_allclose(sandwich_variance(B, V, W, 50), np.linalg.inv(B.T @ W @ B) / 50, rtol=1e-10)
    np.testing.assert_allclose(sandwich_variance(np.eye(2), np.eye(2), np.eye(2), 10), np.eye(2) / 10)


def test_sandwich_linear_iv_textbook():
    model, data, _ = _linear_problem(9, 2, 2)
    y, X, Z = model.arrays(data)
    theta = np.linalg.solve(Z.T @ X, Z.T @ y)
    e = y - X @ theta
    contrib = Z * e[:, None]
    S = np.cov(contrib, rowvar=False)
    n = data.n
    ZX_inv = np.linalg.inv(Z.T @ X / n)
    textbook = ZX_inv @ S @ ZX_inv.T / n
    qj_B = model.slope(data)
    np.testing.assert_allclose(sandwich_variance(qj_B, S, np.eye(2), n), textbook, rtol=1e-8, atol=1e-14)


def test_sandwich_rank_deficient():
    with pytest.raises(SingularVarianceError):
        sandwich_variance(np.array([[1.0, 0.0], [2.0, 0.0]]), np.eye(2), np.eye(2), 10)


def test_json_round_trip(nls_strong):
    model, data, space, _ = nls_strong
    qj = fit_ls(screen_grid(model, data, space, 2000, 0.1, seed=6), data.n)
    back = QuasiJacobian.from_dict(json.loads(qj.to_json()))
    np.testing.assert_array_equal(back.slope_B, qj.slope_B)
    assert back.n == 1000
