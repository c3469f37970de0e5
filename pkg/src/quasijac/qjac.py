"""Quasi-Jacobian fits over level-set samples and their normalization."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDesignError, SingularVarianceError
from .levelset import LevelSetSample
from .models import ParameterSpace
from .numerics import spd_inv_sqrt, weighted_least_squares


@dataclass
class QuasiJacobian:
    """Affine approximation ``gbar(theta) ~ A + B theta`` on a level set.

    Attributes
    ----------
    intercept_A : (d_g,) array
    slope_B : (d_g, d_theta) array
    theta_bar : (d_theta,) array
        Weighted mean of the draws.
    sigma_n : (d_theta, d_theta) array
        Weighted covariance of the draws (weights sum to one, no correction).
    vbar : (d_g, d_g) array
        Weighted average of the moment variances over the draws.
    kappa : float
    n : int
    """

    intercept_A: np.ndarray
    slope_B: np.ndarray
    theta_bar: np.ndarray
    sigma_n: np.ndarray
    vbar: np.ndarray
    kappa: float
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "intercept_A": self.intercept_A.tolist(),
            "slope_B": self.slope_B.tolist(),
            "theta_bar": self.theta_bar.tolist(),
            "sigma_n": self.sigma_n.tolist(),
            "vbar": self.vbar.tolist(),
            "kappa": float(self.kappa),
            "n": int(self.n),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "QuasiJacobian":
        arr = lambda k: np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(arr("intercept_A"), arr("slope_B"), arr("theta_bar"), arr("sigma_n"), arr("vbar"), float(d["kappa"]), int(d.get("n", 0)))


def draw_moments(draws: np.ndarray, weights: np.ndarray):
    """Weighted mean and covariance (normalized weights, no small-sample correction)."""
    w = weights / weights.sum()
    mean = w @ draws
    centred = draws - mean
    cov = (centred * w[:, None]).T @ centred
    return mean, 0.5 * (cov + cov.T)


def fit_ls(sample: LevelSetSample, n: int = 0) -> QuasiJacobian:
    """Weighted least squares of ``gbar(theta_b)`` on ``(1, theta_b)``.

    The regression is run on draws centred at their weighted mean, which
    leaves the fitted slope unchanged and improves conditioning.
    """
    w = sample.weights
    theta_bar, sigma = draw_moments(sample.draws, w)
    X = np.column_stack([np.ones(sample.size), sample.draws - theta_bar])
    coef = weighted_least_squares(X, sample.gbar, w)
    B = coef[1:].T
    A = coef[0] - B @ theta_bar
    vbar = np.einsum("b,bij->ij", w / w.sum(), sample.vhat)
    return QuasiJacobian(A, B, theta_bar, sigma, 0.5 * (vbar + vbar.T), sample.bandwidth, n)


@dataclass
class SupnormFit:
    intercept: np.ndarray
    slope: np.ndarray
    minimax: float
    converged: bool
    iterations: int


def fit_supnorm(sample: LevelSetSample, max_iter: int = 500, tol: float = 1e-8, weight_floor: float = 1e-10) -> SupnormFit:
    """Discrete Chebyshev fit of ``gbar`` on ``(1, theta)`` by Lawson's iteration.

    Minimizes ``max_b K_b ||gbar_b - A - B theta_b||`` over the retained draws,
    where ``K_b`` is the kernel value (the sample weight scaled to max one).
    Each step solves a weighted least squares problem and multiplies the
    Lawson weights by the scaled residual norms.  Stops when the Lawson lower
    bound is within ``tol`` (relative) of the best minimax value.  The best
    iterate is returned; ``converged`` is False if ``max_iter`` was reached.
    """
    K = sample.weights / sample.weights.max()
    centre = sample.weights @ sample.draws
    X = np.column_stack([np.ones(sample.size), sample.draws - centre])
    Y = sample.gbar
    u = np.full(sample.size, 1.0 / sample.size)
    best = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            coef = weighted_least_squares(X, Y, u * K**2)
        except DegenerateDesignError:
            break
        r = K * np.linalg.norm(Y - X @ coef, axis=1)
        upper = float(r.max())
        lower = float(np.sqrt(u @ r**2))
        if best is None or upper < best[1]:
            best = (coef, upper)
        if upper <= 1e-14 * max(1.0, np.abs(Y).max()) or best[1] - lower <= tol * best[1]:
            converged = True
            break
        u = u * r
        total = u.sum()
        if not np.isfinite(total) or total <= 0:
            break
        u = np.maximum(u / total, weight_floor)
        u /= u.sum()
    if best is None:
        raise DegenerateDesignError("sup-norm fit could not start: degenerate design")
    if not converged:
        warnings.warn(f"Lawson iteration stopped after {it} steps without meeting tolerance", RuntimeWarning, stacklevel=2)
    coef = best[0]
    slope = coef[1:].T
    return SupnormFit(coef[0] - slope @ centre, slope, best[1], converged, it)


def normalized_matrix(qj: QuasiJacobian, space: ParameterSpace, floor: float | None = None, normalize_sigma: bool = True) -> np.ndarray:
    """``Vbar^{-1/2} B P Sigma^{-1/2}`` with ``P`` selecting the nuisance coordinates.

    ``normalize_sigma=False`` drops the right factor (unnormalized variant).
    """
    P = space.nuisance_projector()
    M = spd_inv_sqrt(qj.vbar, floor) @ qj.slope_B @ P
    if normalize_sigma:
        M = M @ spd_inv_sqrt(qj.sigma_n, floor)
    return M


def sandwich_variance(slope_B, vhat, weight, n: int) -> np.ndarray:
    """``(B'WB)^{-1} B'W V W B (B'WB)^{-1} / n``.

    ``slope_B`` may be a :class:`QuasiJacobian`.  Raises
    :class:`SingularVarianceError` when ``B`` lacks full column rank.
    """
    B = slope_B.slope_B if isinstance(slope_B, QuasiJacobian) else np.atleast_2d(np.asarray(slope_B, dtype=float))
    W = np.asarray(weight, dtype=float)
    V = np.asarray(vhat, dtype=float)
    s = np.linalg.svd(B, compute_uv=False)
    if s.size < B.shape[1] or s[-1] <= 1e-10 * max(s[0], 1e-300):
        raise SingularVarianceError("slope matrix is rank deficient; sandwich variance undefined")
    bread = B.T @ W @ B
    try:
        inv = np.linalg.inv(bread)
    except np.linalg.LinAlgError as exc:
        raise SingularVarianceError(str(exc)) from exc
    meat = B.T @ W @ V @ W @ B
    out = inv @ meat @ inv / n
    return 0.5 * (out + out.T)
