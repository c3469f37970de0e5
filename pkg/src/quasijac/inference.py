"""Subvector Anderson-Rubin inference and benchmark tests."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConvergenceError, DegenerateSampleError, SingularVarianceError
from .levelset import PmcConfig, pmc_sample
from .models import Dataset, MomentModel, ParameterSpace, objective_many
from .numerics import chi2_quantile, minimize_box, sobol_points


@dataclass(frozen=True)
class ArOptimizer:
    """Budget for the inner infimum over nuisance parameters.

    A coarse grid of ``grid_fallback ** d_theta2`` points (capped at
    ``grid_cap``; a Sobol set is used beyond the cap) is followed by local
    refinements from the ``multistart`` best grid points: bounded Brent
    searches between grid neighbours when there is one nuisance parameter,
    box-reflected Nelder-Mead otherwise.
    """

    multistart: int = 20
    grid_fallback: int = 201
    grid_cap: int = 20000
    tol: float = 1e-10


@dataclass
class ArStatistic:
    value: float
    argmin: np.ndarray
    probes: np.ndarray = field(repr=False)
    probe_values: np.ndarray = field(repr=False)


def _nuisance_grid(space: ParameterSpace, cfg: ArOptimizer) -> np.ndarray:
    d2 = space.d_theta2
    lo = space.lower[list(space.nuisance_indices)]
    hi = space.upper[list(space.nuisance_indices)]
    if cfg.grid_fallback**d2 <= cfg.grid_cap:
        axes = [np.linspace(lo[j], hi[j], cfg.grid_fallback) for j in range(d2)]
        return np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, d2)
    return lo + (hi - lo) * sobol_points(d2, cfg.grid_cap, scramble_seed=0)


def _local_minima_order(grid: np.ndarray, values: np.ndarray, d2: int, k: int) -> np.ndarray:
    """Indices of up to ``k`` starting points, preferring grid local minima in 1-d."""
    order = np.argsort(values, kind="stable")
    if d2 == 1 and grid.shape[0] >= 3:
        v = values
        left = np.r_[np.inf, v[:-1]]
        right = np.r_[v[1:], np.inf]
        minima = np.flatnonzero((v <= left) & (v <= right) & ((v < left) | (v < right)))
        minima = minima[np.argsort(v[minima], kind="stable")]
        return minima[:k]
    return order[:k]


def ar_statistic(
    model: MomentModel,
    data: Dataset,
    theta10,
    space: ParameterSpace,
    optimizer: ArOptimizer | None = None,
    weight=None,
) -> ArStatistic:
    """``inf over theta2 of n gbar' W gbar`` at ``theta1 = theta10``.

    ``W`` is ``Vhat(theta)^{-1}`` re-evaluated at each point (continuous
    updating) unless a fixed ``weight`` matrix is given.  The returned value
    is the minimum over every probed point, so it never exceeds ``n Q`` at
    any recorded probe.
    """
    cfg = optimizer or ArOptimizer()
    theta10 = np.atleast_1d(np.asarray(theta10, dtype=float))
    n = data.n
    d2 = space.d_theta2
    if d2 == 0:
        theta = space.assemble(theta10, np.empty(0))
        v = float(n * objective_many(model, data, theta[None, :], weight)[0][0])
        return ArStatistic(v, np.empty(0), np.empty((1, 0)), np.array([v]))

    probes, values = [], []

    def batch(theta2s):
        t2 = np.atleast_2d(theta2s)
        full = space.assemble(np.broadcast_to(theta10, (t2.shape[0], theta10.size)), t2)
        q = n * objective_many(model, data, full, weight)[0]
        probes.append(t2.copy())
        values.append(q)
        return q

    grid = _nuisance_grid(space, cfg)
    gv = batch(grid)
    finite = np.isfinite(gv)
    lo = space.lower[list(space.nuisance_indices)]
    hi = space.upper[list(space.nuisance_indices)]
    starts = _local_minima_order(grid, np.where(finite, gv, np.inf), d2, cfg.multistart)
    for i in starts:
        if not finite[i]:
            continue
        if d2 == 1:
            # the grid brackets each local minimum between its neighbours
            a = grid[max(i - 1, 0), 0]
            b = grid[min(i + 1, grid.shape[0] - 1), 0]
            minimize_scalar(
                lambda z: float(batch(np.array([[z]]))[0]),
                bounds=(a, b),
                method="bounded",
                options={"xatol": cfg.tol * max(1.0, abs(grid[i, 0])), "maxiter": 200},
            )
        else:
            minimize_box(lambda z: float(batch(z[None, :])[0]), grid[i], lo, hi, tol=cfg.tol, scale=0.05)
    P = np.vstack(probes)
    V = np.concatenate(values)
    if not np.any(np.isfinite(V)):
        raise ConvergenceError("AR objective was non-finite at every probe", best=np.inf)
    k = int(np.nanargmin(np.where(np.isfinite(V), V, np.inf)))
    return ArStatistic(float(V[k]), P[k], P, V)


@dataclass(frozen=True)
class ArTestResult:
    theta10: tuple
    ar_stat: float
    argmin_theta2: tuple
    d_hat: int
    df: int
    critical: float
    alpha: float
    reject: bool

    def to_dict(self) -> dict:
        return {
            "theta10": list(self.theta10),
            "ar_stat": self.ar_stat,
            "argmin_theta2": list(self.argmin_theta2),
            "d_hat": self.d_hat,
            "df": self.df,
            "critical": self.critical,
            "alpha": self.alpha,
            "reject": self.reject,
        }


def ar_test(ar_stat: float, d_g: int, d_hat: int, alpha: float, theta10=(), argmin_theta2=()) -> ArTestResult:
    """Reject iff ``ar_stat`` exceeds the ``1 - alpha`` quantile of chi-square(d_g - d_hat)."""
    if d_hat < 0 or d_hat >= d_g:
        raise ValueError(f"d_hat={d_hat} incompatible with d_g={d_g}")
    df = d_g - d_hat
    crit = chi2_quantile(df, 1.0 - alpha)
    return ArTestResult(
        tuple(float(x) for x in np.atleast_1d(theta10)),
        float(ar_stat),
        tuple(float(x) for x in np.atleast_1d(argmin_theta2)),
        int(d_hat),
        int(df),
        float(crit),
        float(alpha),
        bool(ar_stat > crit),
    )


@dataclass(frozen=True)
class TestDecision:
    method: str
    statistic: float
    critical: float
    df: int
    reject: bool
    applicable: bool = True
    info: dict = field(default_factory=dict)


def projection_test(ar_stat: float, d_g: int, alpha: float) -> TestDecision:
    """Full projection: chi-square(d_g) critical value."""
    crit = chi2_quantile(d_g, 1.0 - alpha)
    return TestDecision("projection", float(ar_stat), crit, d_g, bool(ar_stat > crit))


@dataclass(frozen=True)
class PointOptimizer:
    screen: int = 4096
    multistart: int = 20
    tol: float = 1e-10
    seed: int = 0


def point_estimate(model: MomentModel, data: Dataset, space: ParameterSpace, optimizer: PointOptimizer | None = None, weight=None):
    """Multistart Nelder-Mead minimizer of ``gbar' Vhat^{-1} gbar`` over the box.

    Starts are the best points of a scrambled Sobol screen; returns
    ``(theta_hat, q_min)``.
    """
    cfg = optimizer or PointOptimizer()
    pts = space.scale_unit(sobol_points(space.dim, cfg.screen, scramble_seed=cfg.seed))
    Q = objective_many(model, data, pts, weight)[0]
    Q = np.where(np.isfinite(Q), Q, np.inf)
    order = np.argsort(Q, kind="stable")[: cfg.multistart]
    best_x, best_f = pts[order[0]], float(Q[order[0]])

    def f(theta):
        return float(objective_many(model, data, theta[None, :], weight)[0][0])

    for i in order:
        if not np.isfinite(Q[i]):
            continue
        x, fx, _ = minimize_box(f, pts[i], space.lower, space.upper, tol=cfg.tol, scale=0.02)
        if fx < best_f:
            best_x, best_f = x, fx
    if not np.isfinite(best_f):
        raise ConvergenceError("objective non-finite at every start", best=np.inf)
    return np.asarray(best_x, dtype=float), float(best_f)


def fd_jacobian(model: MomentModel, data: Dataset, theta, h=None) -> np.ndarray:
    """Central-difference Jacobian of ``gbar`` with step ``max(1e-5, 1e-4 |theta_j|)``."""
    theta = np.asarray(theta, dtype=float)
    d = theta.size
    steps = np.maximum(1e-5, 1e-4 * np.abs(theta)) if h is None else np.broadcast_to(np.asarray(h, dtype=float), (d,))
    pts = np.repeat(theta[None, :], 2 * d, axis=0)
    for j in range(d):
        pts[2 * j, j] += steps[j]
        pts[2 * j + 1, j] -= steps[j]
    g, _ = model.evaluate_many(pts, data)
    return ((g[0::2] - g[1::2]) / (2 * steps)[:, None]).T


def wald_test(theta_hat, target_value, variance, alpha: float = 0.05, target_indices=(0,)) -> TestDecision:
    """Quadratic form in the target block; not applicable when its variance is singular."""
    idx = list(target_indices)
    diff = np.atleast_1d(np.asarray(theta_hat, dtype=float)[idx] - np.asarray(target_value, dtype=float))
    crit = chi2_quantile(len(idx), 1.0 - alpha)
    if variance is None:
        return TestDecision("wald", np.nan, crit, len(idx), False, applicable=False)
    block = np.atleast_2d(np.asarray(variance, dtype=float)[np.ix_(idx, idx)])
    try:
        stat = float(diff @ np.linalg.solve(block, diff))
    except np.linalg.LinAlgError:
        return TestDecision("wald", np.nan, crit, len(idx), False, applicable=False)
    if not np.isfinite(stat) or np.linalg.eigvalsh(block)[0] <= 0:
        return TestDecision("wald", np.nan, crit, len(idx), False, applicable=False)
    return TestDecision("wald", stat, crit, len(idx), bool(stat > crit))


def ac12_test(ar_stat: float, d_g: int, d_theta2: int, theta_hat, variance, n: int, cutoff: float, alpha: float = 0.05, target_index: int = 0) -> TestDecision:
    """Benchmark two-step test switching on ``|theta1_hat| / sigma_hat``.

    ``sigma_hat`` is the asymptotic standard deviation ``sqrt(n Var)`` of
    the target estimate.  At or below ``cutoff`` the robust chi-square(d_g)
    critical value is used, above it chi-square(d_g - d_theta2).  A singular
    variance counts as weak identification.
    """
    stat_ics = 0.0
    if variance is not None:
        var = float(np.asarray(variance)[target_index, target_index])
        if var > 0 and np.isfinite(var):
            stat_ics = abs(float(np.asarray(theta_hat)[target_index])) / np.sqrt(n * var)
    df = d_g - d_theta2 if stat_ics > cutoff else d_g
    crit = chi2_quantile(df, 1.0 - alpha)
    return TestDecision("ac12", float(ar_stat), crit, df, bool(ar_stat > crit), info={"ics": stat_ics})


@dataclass
class ConfidenceSet:
    accepted: np.ndarray
    witnesses: np.ndarray
    statistics: np.ndarray
    level: float
    d_hat_used: int
    critical: float
    hull: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return self.accepted.shape[0] == 0


def _hull(points: np.ndarray):
    if points.shape[0] == 0:
        return None
    if points.shape[1] == 1:
        return np.array([[points.min()], [points.max()]])
    if points.shape[0] <= points.shape[1]:
        return None
    from scipy.spatial import ConvexHull, QhullError

    try:
        return points[ConvexHull(points).vertices]
    except QhullError:
        return None


def confidence_set(
    model: MomentModel,
    data: Dataset,
    space: ParameterSpace,
    alpha: float,
    d_hat: int,
    method: str = "grid",
    B: int = 10000,
    seed: int | None = 0,
    weight=None,
    pmc_config: PmcConfig | None = None,
) -> ConfidenceSet:
    """Target values whose joint objective satisfies ``n Q(theta) <= critical`` for some nuisance value.

    ``grid`` screens ``B`` Sobol points of the full box; ``pmc`` samples the
    level set ``Q <= critical / n``.  Each accepted target value keeps its
    witnessing full parameter and is re-certified by a fresh evaluation.
    """
    n = data.n
    crit = chi2_quantile(model.d_g - d_hat, 1.0 - alpha)
    info = {"method": method}
    if method == "grid":
        draws = space.scale_unit(sobol_points(space.dim, B, scramble_seed=seed))
    elif method == "pmc":
        cfg = pmc_config or PmcConfig(seed=seed)
        try:
            draws = pmc_sample(model, data, space, float(np.sqrt(crit / n)), B, cfg, weight=weight).draws
        except (ConvergenceError, DegenerateSampleError) as exc:
            info["status"] = f"sampler stopped: {exc}"
            draws = np.empty((0, space.dim))
    else:
        raise ValueError(f"unknown confidence-set method {method!r}")
    stats = n * objective_many(model, data, draws, weight)[0] if draws.shape[0] else np.empty(0)
    keep = np.isfinite(stats) & (stats <= crit)
    witnesses = draws[keep]
    accepted = witnesses[:, list(space.target_indices)]
    return ConfidenceSet(accepted, witnesses, stats[keep], 1.0 - alpha, int(d_hat), float(crit), _hull(accepted), info)
