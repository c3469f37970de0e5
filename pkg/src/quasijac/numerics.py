"""Numerical kernels used throughout the package.

Chi-squared quantiles, symmetric inverse square roots, weighted least
squares, Sobol points and a box-constrained Nelder-Mead wrapper.  All
functions are pure.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import optimize, special
from scipy.stats import qmc

from .errors import ConvergenceError, DegenerateDesignError, DomainError, FlooringWarning

PINV_RTOL = 1e-12

__all__ = [
    "chi2_cdf",
    "chi2_quantile",
    "spd_inv_sqrt",
    "weighted_least_squares",
    "sobol_points",
    "SOBOL_MAX_DIM",
    "minimize_box",
    "reflect_into_box",
    "seed_sequence",
]


# ---------------------------------------------------------------------------
# chi-squared distribution
# ---------------------------------------------------------------------------


def chi2_cdf(df, x):
    """CDF of the chi-squared distribution, P(df/2, x/2) with P the regularized lower incomplete gamma."""
    if df < 1:
        raise DomainError(f"degrees of freedom must be >= 1, got {df}")
    x = np.asarray(x, dtype=float)
    return special.gammainc(0.5 * df, 0.5 * np.maximum(x, 0.0))


def chi2_quantile(df: int, p: float) -> float:
    """Inverse chi-squared CDF by bracketed monotone root finding.

    Parameters
    ----------
    df : int
        Degrees of freedom, at least 1.
    p : float
        Probability in the open interval (0, 1).

    Returns
    -------
    float
        ``q`` such that ``chi2_cdf(df, q) == p`` to within 1e-10.
    """
    if not (isinstance(df, (int, np.integer)) or float(df).is_integer()) or df < 1:
        raise DomainError(f"degrees of freedom must be a positive integer, got {df}")
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    df = int(df)

    def gap(q):
        return float(chi2_cdf(df, q)) - p

    lo, hi = 0.0, max(1.0, float(df))
    while gap(hi) < 0.0:
        lo, hi = hi, 2.0 * hi
    q = optimize.brentq(gap, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return float(q)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def spd_inv_sqrt(M, floor: float | None = None) -> np.ndarray:
    """Symmetric inverse square root with eigenvalues clamped below at ``floor``.

    The default floor is ``1e-10 * trace(M) / dim``.  A ``FlooringWarning`` is
    issued when clamping changes any eigenvalue.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {M.shape}")
    M = 0.5 * (M + M.T)
    dim = M.shape[0]
    if floor is None:
        floor = 1e-10 * max(np.trace(M), np.finfo(float).tiny) / dim
    if floor <= 0:
        raise DomainError("floor must be positive")
    try:
        evals, evecs = np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError("eigendecomposition did not converge") from exc
    if np.any(evals < floor):
        warnings.warn(
            f"{int(np.sum(evals < floor))} eigenvalue(s) clamped at {floor:.3g}",
            FlooringWarning,
            stacklevel=2,
        )
        evals = np.maximum(evals, floor)
    R = (evecs * evals ** -0.5) @ evecs.T
    return 0.5 * (R + R.T)


def weighted_least_squares(regressors, responses, weights) -> np.ndarray:
    """Weighted least-squares coefficients ``argmin sum_b w_b ||y_b - c' x_b||^2``.

    Parameters
    ----------
    regressors : (B, k) array
        Design matrix; the package always passes ``(1, theta_b')``.
    responses : (B, m) or (B,) array
    weights : (B,) array of nonnegative finite reals

    Returns
    -------
    (k, m) array of coefficients (or (k,) for a 1-d response).

    Raises
    ------
    DegenerateDesignError
        If fewer than ``k + 1`` rows carry positive weight or the weighted
        design has a singular value below ``1e-12`` times the largest.
    """
    X = np.asarray(regressors, dtype=float)
    Y = np.asarray(responses, dtype=float)
    w = np.asarray(weights, dtype=float)
    squeeze = Y.ndim == 1
    if squeeze:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] != Y.shape[0] or w.shape != (X.shape[0],):
        raise DomainError("inconsistent shapes in weighted least squares")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise DomainError("weights must be finite and nonnegative")
    k = X.shape[1]
    keep = w > 0
    if keep.sum() < k + 1:
        raise DegenerateDesignError(f"{int(keep.sum())} positively weighted rows; need at least {k + 1}")
    sw = np.sqrt(w[keep] / w[keep].sum())
    Xw = X[keep] * sw[:, None]
    Yw = Y[keep] * sw[:, None]
    U, s, Vt = np.linalg.svd(Xw, full_matrices=False)
    if s[-1] <= PINV_RTOL * s[0]:
        raise DegenerateDesignError(
            f"weighted design is rank deficient (condition number {s[0] / max(s[-1], 1e-300):.3g})"
        )
    coef = Vt.T @ ((U.T @ Yw) / s[:, None])
    return coef[:, 0] if squeeze else coef


# ---------------------------------------------------------------------------
# Sobol sequence
# ---------------------------------------------------------------------------

SOBOL_MAX_DIM = qmc.Sobol.MAXDIM


def sobol_points(dim: int, count: int, scramble_seed: int | None = None, skip: int | None = None) -> np.ndarray:
    """First ``count`` Sobol points in ``[0, 1)^dim`` (scipy's Gray-code order).

    Unscrambled sequences skip the all-zero point at index 0 by default.
    With ``scramble_seed`` a linear matrix scramble and digital shift are
    applied and no point is skipped unless ``skip`` says otherwise.
    """
    if dim < 1 or dim > SOBOL_MAX_DIM:
        raise DomainError(f"Sobol dimension must be in [1, {SOBOL_MAX_DIM}], got {dim}")
    if count < 1:
        raise DomainError("count must be positive")
    if skip is None:
        skip = 0 if scramble_seed is not None else 1
    if count + skip >= 2**32:
        raise DomainError("too many points requested")
    scramble = scramble_seed is not None
    engine = qmc.Sobol(dim, scramble=scramble, seed=np.random.default_rng(scramble_seed) if scramble else None)
    if skip:
        engine.fast_forward(skip)
    with warnings.catch_warnings():
        # balance holds only for powers of two; callers use arbitrary counts
        warnings.filterwarnings("ignore", message=".*balance properties.*", category=UserWarning)
        return engine.random(count)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def reflect_into_box(x, lower, upper) -> np.ndarray:
    """Fold ``x`` into ``[lower, upper]`` by mirror reflection at the faces."""
    x = np.asarray(x, dtype=float)
    lower = np.asarray(lower, dtype=float)
    width = np.asarray(upper, dtype=float) - lower
    y = np.mod(x - lower, 2.0 * width)
    y = np.where(y > width, 2.0 * width - y, y)
    return lower + y


def minimize_box(fun, x0, lower, upper, *, tol: float = 1e-10, maxiter: int | None = None, scale: float = 0.05):
    """Nelder-Mead over a box, handled by reflecting trial points into the box.

    ``scale`` sets the initial simplex edge as a fraction of each box width.
    Returns ``(x_best, f_best, n_evals)`` with ``x_best`` inside the box.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x0 = reflect_into_box(x0, lower, upper)
    d = x0.size
    step = scale * (upper - lower)
    simplex = np.vstack([x0] + [x0 + np.eye(d)[i] * step[i] for i in range(d)])

    def wrapped(z):
        return fun(reflect_into_box(z, lower, upper))

    res = optimize.minimize(
        wrapped,
        x0,
        method="Nelder-Mead",
        options={
            "initial_simplex": simplex,
            "xatol": 1e-12,
            "fatol": tol,
            "maxiter": maxiter or 400 * d,
            "maxfev": maxiter or 400 * d,
        },
    )
    if not np.isfinite(res.fun):
        raise ConvergenceError("Nelder-Mead ended at a non-finite value", best=float(res.fun))
    return reflect_into_box(res.x, lower, upper), float(res.fun), int(res.nfev)


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------


def seed_sequence(master_seed: int, *keys: int) -> np.random.SeedSequence:
    """Independent child stream for ``(master_seed, *keys)``; same keys give the same stream."""
    return np.random.SeedSequence(entropy=int(master_seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
