import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quasijac.errors import ConsistencyError
from quasijac.ics import select_category, singular_values_sorted
from quasijac.levelset import compute_bandwidth, compute_cutoff, screen_grid
from quasijac.models import ParameterSpace
from quasijac.qjac import fit_ls, normalized_matrix
from quasijac.levelset import LevelSetSample


def test_zero_matrix():
    np.testing.assert_array_equal(singular_values_sorted(np.zeros((3, 2))), [0, 0])


def test_diagonal_case():
    np.testing.assert_allclose(singular_values_sorted(np.diag([4.0, 3.0])), [3, 4])


def test_padding_when_wide():
    sv = singular_values_sorted(np.array([[1.0, 0.0, 0.0]]))
    np.testing.assert_allclose(sv, [0, 0, 1])


@pytest.mark.parametrize("seed", range(5))
def test_random_matrix_against_eigensolver(seed):
    M = np.random.default_rng(seed).standard_normal((4, 3))
    oracle = np.sqrt(np.clip(np.linalg.eigvalsh(M.T @ M), 0, None))
    np.testing.assert_allclose(singular_values_sorted(M), oracle, rtol=0, atol=1e-10)


def test_rejects_non_finite():
    with pytest.raises(ValueError):
        singular_values_sorted(np.array([[np.nan]]))


@pytest.mark.parametrize(
    "sv, d_hat",
    [((0.0, 0.05), 0), ((0.0, 3.2), 1), ((0.0, 0.21), 0)],
)
def test_select_examples(sv, d_hat):
    res = select_category(sv, 0.21, 1, 1)
    assert res.d_hat == d_hat
    assert res.to_dict()["d_theta2"] == 1


def test_projection_zero_clamped_and_checked():
    res = select_category([5e-9, 1.0], 0.2, 1, 1)
    assert res.singular_values[0] == 0.0
    with pytest.raises(ConsistencyError):
        select_category([1e-3, 1.0], 0.2, 1, 1)


def test_unsorted_or_wrong_length():
    with pytest.raises(ValueError):
        select_category([1.0, 0.0], 0.2, 1, 1)
    with pytest.raises(ValueError):
        select_category([0.0, 1.0, 2.0], 0.2, 1, 1)


@given(
    st.lists(st.floats(0, 10), min_size=1, max_size=5),
    st.floats(0, 10),
    st.floats(0, 10),
)
@settings(max_examples=200)
def test_d_hat_monotone_in_cutoff(nuis, c1, c2):
    sv = np.concatenate([[0.0], np.sort(nuis)])
    lo, hi = sorted((c1, c2))
    a = select_category(sv, lo, 1, len(nuis)).d_hat
    b = select_category(sv, hi, 1, len(nuis)).d_hat
    assert b <= a
    assert 0 <= b <= len(nuis)


def _d_hat(sample, space, n):
    sv = singular_values_sorted(normalized_matrix(fit_ls(sample), space))
    return select_category(sv, compute_cutoff(n), 1, 1).d_hat


@pytest.mark.parametrize("fixture", ["nls_strong", "nls_weak"])
def test_d_hat_invariant_to_rescaling_and_permutation(fixture, request):
    model, data, space, _ = request.getfixturevalue(fixture)
    s = screen_grid(model, data, space, 10000, compute_bandwidth(1000), seed=8)
    base = _d_hat(s, space, 1000)
    C = np.array([[1.5, -0.4], [0.2, 0.7]])
    rescaled = LevelSetSample(
        s.draws, s.objectives, s.weights, s.gbar @ C.T, np.einsum("ij,bjk,lk->bil", C, s.vhat, C), s.bandwidth, s.q_min
    )
    assert _d_hat(rescaled, space, 1000) == base
    # Swap the coordinate roles: the target becomes column 1.
    swapped = LevelSetSample(s.draws[:, ::-1], s.objectives, s.weights, s.gbar, s.vhat, s.bandwidth, s.q_min)
    sp = ParameterSpace(space.lower[::-1], space.upper[::-1], (1,), (0,))
    assert _d_hat(swapped, sp, 1000) == base


def test_regimes_on_fixtures(nls_strong, nls_weak):
    kappa = compute_bandwidth(1000)
    for (model, data, space, _), expected in ((nls_strong, 1), (nls_weak, 0)):
        s = screen_grid(model, data, space, 10000, kappa, seed=9)
        assert _d_hat(s, space, 1000) == expected
