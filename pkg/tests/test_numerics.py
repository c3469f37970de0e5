import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import qmc

from quasijac.errors import DegenerateDesignError, DomainError, FlooringWarning
from quasijac.numerics import (
    SOBOL_MAX_DIM,
    chi2_cdf,
    chi2_quantile,
    minimize_box,
    reflect_into_box,
    sobol_points,
    spd_inv_sqrt,
    weighted_least_squares,
)

from conftest import random_spd

# Frozen from quadrature of the chi-squared density followed by root finding.
CHI2_1_95 = 3.84145882069


@pytest.mark.parametrize(
    "df, expected, tol",
    [(6, 12.6, 0.05), (12, 21.0, 0.05), (2, 6.0, 0.05), (6, 12.592, 5e-4), (12, 21.026, 5e-4), (2, 5.991, 5e-4)],
)
def test_chi2_quantile_reported_values(df, expected, tol):
    assert abs(chi2_quantile(df, 0.95) - expected) <= tol


def test_chi2_quantile_matches_quadrature_oracle():
    assert chi2_quantile(1, 0.95) == pytest.approx(CHI2_1_95, abs=1e-10)


def test_chi2_round_trip_grid():
    ps = np.round(np.arange(0.01, 0.995, 0.01), 2)
    worst = max(abs(float(chi2_cdf(df, chi2_quantile(df, p))) - p) for df in range(1, 31) for p in ps)
    assert worst <= 1e-10


@pytest.mark.parametrize("df, p", [(0, 0.5), (-1, 0.5), (1, 0.0), (1, 1.0), (1, 1.5), (2.5, 0.5)])
def test_chi2_quantile_domain(df, p):
    with pytest.raises(DomainError):
        chi2_quantile(df, p)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_chi2_quantile_monotone(df, p, dp):
    q = chi2_quantile(df, p)
    assert chi2_quantile(df, p + dp) > q
    assert chi2_quantile(df + 1, p) > q


def test_spd_inv_sqrt_closed_forms():
    np.testing.assert_allclose(spd_inv_sqrt(np.eye(3)), np.eye(3), atol=1e-14)
    np.testing.assert_allclose(spd_inv_sqrt(np.diag([4.0, 9.0])), np.diag([0.5, 1 / 3]), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(1.0, 1e4))
def test_spd_inv_sqrt_whitens(d, seed, cond):
    M = random_spd(np.random.default_rng(seed), d, cond)
    R = spd_inv_sqrt(M)
    assert np.allclose(R, R.T, atol=1e-12)
    assert np.linalg.eigvalsh(R).min() > 0
    assert np.linalg.norm(R @ M @ R - np.eye(d)) <= 1e-8


def test_spd_inv_sqrt_floors_and_warns():
    with pytest.warns(FlooringWarning):
        R = spd_inv_sqrt(np.diag([1.0, 0.0]), floor=1e-4)
    np.testing.assert_allclose(R, np.diag([1.0, 100.0]))


def test_spd_inv_sqrt_no_warning_when_well_conditioned():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        spd_inv_sqrt(np.diag([1.0, 2.0]))


def _design(rng, B=50, k=3, m=2):
    X = np.column_stack([np.ones(B), rng.standard_normal((B, k - 1))])
    return X, rng.standard_normal((B, m)), rng.uniform(0.1, 2.0, B)


def test_wls_exact_affine_recovery():
    rng = np.random.default_rng(0)
    X, _, w = _design(rng)
    C = rng.standard_normal((3, 2))
    coef = weighted_least_squares(X, X @ C, w)
    np.testing.assert_allclose(coef, C, atol=1e-12)


def test_wls_constant_response_zero_slope():
    rng = np.random.default_rng(1)
    X, _, w = _design(rng)
    coef = weighted_least_squares(X, np.tile([3.0, -1.0], (X.shape[0], 1)), w)
    np.testing.assert_allclose(coef[0], [3.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(coef[1:], 0.0, atol=1e-12)


def test_wls_matches_extended_precision_normal_equations():
    rng = np.random.default_rng(2)
    X, Y, w = _design(rng)
    mpmath.mp.dps = 40
    Xm = mpmath.matrix(X.tolist())
    Wm = mpmath.diag(w.tolist())
    G = Xm.T * Wm * Xm
    cols = [mpmath.lu_solve(G, Xm.T * Wm * mpmath.matrix(Y[:, j].tolist())) for j in range(Y.shape[1])]
    oracle = np.array([[float(c[i]) for c in cols] for i in range(X.shape[1])])
    np.testing.assert_allclose(weighted_least_squares(X, Y, w), oracle, rtol=0, atol=1e-10)


def test_wls_residual_orthogonality():
    rng = np.random.default_rng(3)
    X, Y, w = _design(rng)
    coef = weighted_least_squares(X, Y, w)
    score = X.T @ (w[:, None] * (Y - X @ coef))
    assert np.abs(score).max() <= 1e-8 * max(1.0, np.abs(Y).max())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-6, 1e6))
def test_wls_weight_scale_invariance(seed, scale):
    X, Y, w = _design(np.random.default_rng(seed))
    np.testing.assert_allclose(weighted_least_squares(X, Y, scale * w), weighted_least_squares(X, Y, w), rtol=0, atol=1e-12)


def test_wls_one_dimensional_response():
    rng = np.random.default_rng(4)
    X, Y, w = _design(rng)
    assert weighted_least_squares(X, Y[:, 0], w).shape == (3,)


def test_wls_degenerate_design():
    X = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(DegenerateDesignError):
        weighted_least_squares(X, np.ones(10), np.ones(10))
    X = np.column_stack([np.ones(10), np.arange(10.0)])
    w = np.zeros(10)
    w[:2] = 1.0
    with pytest.raises(DegenerateDesignError):
        weighted_least_squares(X, np.ones(10), w)


def test_wls_rejects_negative_weights():
    with pytest.raises(DomainError):
        weighted_least_squares(np.ones((5, 1)), np.ones(5), -np.ones(5))


def _radical_inverse(i):
    out, f = 0.0, 0.5
    while i:
        out += f * (i & 1)
        i >>= 1
        f /= 2
    return out


def test_sobol_first_coordinate_is_radical_inverse_set():
    # unscrambled first coordinate is a permutation of the van der Corput points 1..2^k - 1
    k = 7
    got = np.sort(sobol_points(1, 2**k - 1).ravel())
    np.testing.assert_array_equal(got, np.sort([_radical_inverse(i) for i in range(1, 2**k)]))


@pytest.mark.parametrize("dim", [1, 2, 5, 20, 40])
def test_sobol_dyadic_intervals(dim):
    k = 8
    P = sobol_points(dim, 2**k, skip=0)
    for j in range(dim):
        counts = np.bincount(np.floor(P[:, j] * 2**k).astype(int), minlength=2**k)
        assert np.all(counts == 1)


def test_sobol_two_dimensional_net():
    # (0, m, 2)-net: every elementary box of volume 2^-m holds exactly one point
    m = 6
    P = sobol_points(2, 2**m, skip=0)
    for a in range(m + 1):
        ix = np.floor(P[:, 0] * 2**a).astype(int) * 2 ** (m - a) + np.floor(P[:, 1] * 2 ** (m - a)).astype(int)
        assert np.all(np.bincount(ix, minlength=2**m) == 1)


def test_sobol_scrambled_deterministic_and_balanced():
    a = sobol_points(3, 512, scramble_seed=9)
    b = sobol_points(3, 512, scramble_seed=9)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, sobol_points(3, 512, scramble_seed=10))
    assert np.all((a >= 0) & (a < 1))
    for j in range(3):
        assert np.all(np.bincount(np.floor(a[:, j] * 512).astype(int), minlength=512) == 1)


def test_sobol_discrepancy_below_pseudo_random():
    for dim in range(1, 6):
        P = sobol_points(dim, 1024)
        R = np.random.default_rng(12345).random((1024, dim))
        assert qmc.discrepancy(P, method="L2-star") < qmc.discrepancy(R, method="L2-star")


def test_sobol_dimension_limits():
    with pytest.raises(DomainError):
        sobol_points(0, 4)
    with pytest.raises(DomainError):
        sobol_points(SOBOL_MAX_DIM + 1, 4)


def test_reflect_into_box():
    np.testing.assert_allclose(reflect_into_box([1.5, -0.25, 0.3], [0, 0, 0], [1, 1, 1]), [0.5, 0.25, 0.3])


def test_minimize_box_respects_bounds():
    x, f, _ = minimize_box(lambda z: float(np.sum((z - 3.0) ** 2)), [0.5, 0.5], [0, 0], [1, 1])
    np.testing.assert_allclose(x, [1, 1], atol=1e-5)
    assert f == pytest.approx(8.0, abs=1e-4)
    x, f, _ = minimize_box(lambda z: float(np.sum((z - 0.3) ** 2)), [0.9, 0.1], [0, 0], [1, 1])
    np.testing.assert_allclose(x, [0.3, 0.3], atol=1e-5)
