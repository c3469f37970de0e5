"""Weighted draws on objective level sets.

Two samplers are provided: :func:`screen_grid` evaluates the objective on a
scrambled Sobol grid over the parameter box and keeps the kernel-weighted
draws near the minimum, and :func:`pmc_sample` runs an adaptive Population
Monte Carlo scheme over a decreasing sequence of level sets, which is far
cheaper when the level set is small relative to the box.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .errors import ConvergenceError, DegenerateSampleError, DomainError
from .models import Dataset, MomentEvaluation, MomentModel, ParameterSpace, objective_many
from .numerics import minimize_box, sobol_points

log = logging.getLogger(__name__)

KERNELS = ("uniform", "epanechnikov", "cosine")
KERNEL_RULES = ("squared", "root")


def compute_bandwidth(n: int, sim_ratio: float | None = None) -> float:
    """Level-set radius ``sqrt(2 log log(n_eff) / n)`` with ``n_eff = n (1 + sim_ratio)``.

    ``sim_ratio`` is ``1/S`` for simulated moments computed over ``S`` samples.
    """
    n_eff = _effective_n(n, sim_ratio)
    if n_eff <= np.e:
        raise DomainError(f"effective sample size {n_eff} too small for log log")
    return float(np.sqrt(2.0 * np.log(np.log(n_eff)) / n))


def compute_cutoff(n: int, sim_ratio: float | None = None) -> float:
    """Singular-value cutoff ``sqrt(2 log(n_eff) / n)``."""
    n_eff = _effective_n(n, sim_ratio)
    return float(np.sqrt(2.0 * np.log(n_eff) / n))


def _effective_n(n, sim_ratio):
    if n < 10:
        raise DomainError(f"sample size must be at least 10, got {n}")
    if sim_ratio is not None and sim_ratio < 0:
        raise DomainError("sim_ratio must be nonnegative")
    return n * (1.0 + (sim_ratio or 0.0))


def kernel(x, kind: str = "uniform") -> np.ndarray:
    """Compactly supported kernels on ``[0, 1]``; zero for ``x > 1`` (and at 1 for the smooth ones)."""
    x = np.abs(np.asarray(x, dtype=float))
    if kind == "uniform":
        return (x <= 1.0).astype(float)
    inside = x < 1.0
    if kind == "epanechnikov":
        return np.where(inside, 0.75 * (1.0 - x**2), 0.0)
    if kind == "cosine":
        return np.where(inside, 0.25 * np.pi * np.cos(0.5 * np.pi * np.minimum(x, 1.0)), 0.0)
    raise DomainError(f"unknown kernel {kind!r}; choose from {KERNELS}")


def kernel_argument(objectives, q_min: float, kappa: float, rule: str = "squared") -> np.ndarray:
    """Scaled distance to the minimum fed to the kernel.

    ``squared`` gives ``sqrt(Q - q_min) / kappa`` so the uniform kernel keeps
    ``Q - q_min <= kappa**2``; ``root`` gives ``(sqrt(Q) - sqrt(q_min)) / kappa``.
    """
    Q = np.asarray(objectives, dtype=float)
    if rule == "squared":
        return np.sqrt(np.maximum(Q - q_min, 0.0)) / kappa
    if rule == "root":
        return np.maximum(np.sqrt(np.maximum(Q, 0.0)) - np.sqrt(max(q_min, 0.0)), 0.0) / kappa
    raise DomainError(f"unknown kernel rule {rule!r}")


@dataclass
class LevelSetSample:
    """Positively weighted draws on ``{theta : Q(theta) - q_min <= kappa^2}``."""

    draws: np.ndarray
    objectives: np.ndarray
    weights: np.ndarray
    gbar: np.ndarray
    vhat: np.ndarray
    bandwidth: float
    q_min: float
    kernel: str = "uniform"
    rule: str = "squared"
    theta_min: np.ndarray | None = None
    n_screened: int = 0
    info: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.draws.shape[0]

    @property
    def dim(self) -> int:
        return self.draws.shape[1]

    @property
    def evaluations(self) -> list[MomentEvaluation]:
        return [MomentEvaluation(g, v) for g, v in zip(self.gbar, self.vhat)]

    def effective_size(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def support_ok(self) -> np.ndarray:
        """Per-draw check of the kernel support condition."""
        x = kernel_argument(self.objectives, self.q_min, self.bandwidth, self.rule)
        return kernel(x, self.kernel) > 0

    def check(self):
        """Raise ``AssertionError`` if a stated invariant fails."""
        assert np.all(self.weights > 0)
        assert abs(self.weights.sum() - 1.0) <= 1e-12
        assert np.all(self.support_ok())
        assert self.size >= self.dim + 2


def _finalize(draws, Q, gbar, vhat, weights, kappa, q_min, kind, rule, **extra) -> LevelSetSample:
    keep = weights > 0
    d = draws.shape[1]
    if keep.sum() < d + 2:
        raise DegenerateSampleError(
            f"only {int(keep.sum())} draws on the level set; need at least {d + 2}",
            n_retained=int(keep.sum()),
            required=d + 2,
        )
    w = weights[keep]
    return LevelSetSample(
        draws=draws[keep],
        objectives=Q[keep],
        weights=w / w.sum(),
        gbar=gbar[keep],
        vhat=vhat[keep],
        bandwidth=float(kappa),
        q_min=float(q_min),
        kernel=kind,
        rule=rule,
        **extra,
    )


def refine_minimum(model, data, space: ParameterSpace, start, f_start: float, weight=None, tol: float = 1e-12):
    """One Nelder-Mead run from ``start``; returns the better of start and optimum."""

    def f(theta):
        return float(objective_many(model, data, theta[None, :], weight)[0][0])

    scale = 0.01
    x, fx, _ = minimize_box(f, start, space.lower, space.upper, tol=tol, scale=scale)
    if fx < f_start:
        return x, fx
    return np.asarray(start, dtype=float), float(f_start)


def screen_grid(
    model: MomentModel,
    data: Dataset,
    space: ParameterSpace,
    B: int,
    kappa: float,
    kernel_kind: str = "uniform",
    seed: int | None = None,
    *,
    rule: str = "squared",
    refine: bool = True,
    weight=None,
) -> LevelSetSample:
    """Kernel-weighted level-set draws from a scrambled Sobol grid over the box.

    The minimum ``q_min`` is the grid minimum refined by one Nelder-Mead run
    started at the grid argmin (``refine=False`` keeps the grid minimum).
    """
    if B < 100:
        raise DomainError("screen_grid needs B >= 100")
    if kernel_kind not in KERNELS:
        raise DomainError(f"unknown kernel {kernel_kind!r}")
    draws = space.scale_unit(sobol_points(space.dim, B, scramble_seed=seed))
    Q, gbar, vhat = objective_many(model, data, draws, weight)
    i_min = int(np.argmin(Q))
    theta_min, q_min = draws[i_min], float(Q[i_min])
    if refine:
        theta_min, q_min = refine_minimum(model, data, space, theta_min, q_min, weight)
    w = kernel(kernel_argument(Q, q_min, kappa, rule), kernel_kind)
    return _finalize(draws, Q, gbar, vhat, w, kappa, q_min, kernel_kind, rule, theta_min=theta_min, n_screened=B)


# ---------------------------------------------------------------------------
# Population Monte Carlo
# ---------------------------------------------------------------------------


def pmc_schedule_next(kappa_prev_sq: float, objective_quantile60: float) -> float:
    """Next squared level ``min(0.9 kappa_prev^2, q60)``."""
    if kappa_prev_sq <= 0 or objective_quantile60 <= 0:
        raise DomainError("schedule inputs must be positive")
    return min(0.9 * kappa_prev_sq, objective_quantile60)


@dataclass(frozen=True)
class PmcConfig:
    K_clusters: int = 3
    cov_inflation: float = 2.0
    max_iters: int = 200
    max_retries: int = 1000
    seed: int | None = None
    weighting: str = "mixture"


@dataclass
class PmcState:
    """Population after iteration ``iteration`` of the sampler."""

    draws: np.ndarray
    weights: np.ndarray
    levels: np.ndarray
    gbar: np.ndarray
    vhat: np.ndarray
    kappa_schedule: list[float]
    iteration: int
    cluster_count: int


def _cluster(draws: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """K-means++ labels on standardized draws; empty clusters re-seeded from the largest one."""
    B = draws.shape[0]
    k = max(1, min(k, B))
    if k == 1:
        return np.zeros(B, dtype=int)
    scale = draws.std(axis=0)
    X = (draws - draws.mean(axis=0)) / np.where(scale > 0, scale, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        centroids, labels = kmeans2(X, k, minit="++", seed=rng, missing="warn")
    for _ in range(k):
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        donors = np.flatnonzero(labels == np.argmax(counts))
        centroids[empty[0]] = X[rng.choice(donors)]
        labels = np.argmin(((X[:, None, :] - centroids[None]) ** 2).sum(axis=2), axis=1)
    return labels


def _cluster_covariances(draws, labels, k, inflation):
    d = draws.shape[1]
    overall = np.atleast_2d(np.cov(draws, rowvar=False))
    jitter = 1e-12 * max(np.trace(overall), 1e-300) * np.eye(d)
    covs = np.empty((k, d, d))
    for c in range(k):
        members = draws[labels == c]
        cov = np.atleast_2d(np.cov(members, rowvar=False)) if members.shape[0] > d else overall
        if not np.all(np.isfinite(cov)) or np.linalg.eigvalsh(cov)[0] <= 0:
            cov = overall
        covs[c] = inflation * cov + jitter
    return covs


def _mixture_logpdf(x, centers, weights, labels, chols, chunk: int = 2048):
    """Log density of ``sum_b weights_b N(x; centers_b, cov_{labels_b})``."""
    d = x.shape[1]
    out = np.full(x.shape[0], -np.inf)
    for c in range(chols.shape[0]):
        members = labels == c
        if not members.any():
            continue
        inv = np.linalg.inv(chols[c])
        yc = centers[members] @ inv.T
        lw = np.log(weights[members])
        const = -np.log(np.abs(np.diag(chols[c]))).sum() - 0.5 * d * np.log(2 * np.pi)
        for start in range(0, x.shape[0], chunk):
            yx = x[start : start + chunk] @ inv.T
            D = cdist(yx, yc, "sqeuclidean")
            part = logsumexp(lw[None, :] - 0.5 * D, axis=1) + const
            out[start : start + chunk] = np.logaddexp(out[start : start + chunk], part)
    return out


def _gauss_logpdf(x, mean, chol):
    d = x.shape[1]
    z = np.linalg.solve(chol, (x - mean)[..., None])[..., 0]
    logdet = 2.0 * np.log(np.abs(np.diagonal(chol, axis1=-2, axis2=-1))).sum(axis=-1)
    return -0.5 * (z**2).sum(axis=1) - 0.5 * logdet - 0.5 * d * np.log(2 * np.pi)


def pmc_sample(
    model: MomentModel,
    data: Dataset,
    space: ParameterSpace,
    kappa_target: float,
    B: int,
    config: PmcConfig | None = None,
    *,
    q_min: float = 0.0,
    kernel_kind: str = "uniform",
    weight=None,
    progress=None,
) -> LevelSetSample:
    """Adaptive Population Monte Carlo on ``{theta : Q(theta) - q_min <= kappa_target^2}``.

    The first level is the median of ``Q - q_min`` over ``B`` uniform draws
    (or the target itself if that is larger).  Each later level shrinks by
    :func:`pmc_schedule_next`.  Draws are moved by Gaussian random walks whose
    covariance is ``cov_inflation`` times the covariance of the ancestor's
    K-means cluster, re-proposing until the level constraint holds.

    Every retry draws a fresh ancestor (in proportion to the weights) and a
    fresh step, so an accepted draw has density proportional to the mixture
    ``M(theta) = sum_b w_b q(theta | theta_b)`` restricted to the level set.
    The default ``weighting="mixture"`` therefore weights draws by
    ``1 / M(theta)``, the importance ratio for the uniform target up to a
    constant.  ``"standard"`` uses ``1 / q(theta | ancestor)`` and
    ``"ancestor"`` uses ``w(ancestor) / q(theta | ancestor)``; both ignore
    the truncation of the proposal and are kept for comparison only.
    """
    cfg = config or PmcConfig()
    if cfg.weighting not in ("mixture", "standard", "ancestor"):
        raise DomainError(f"unknown weighting {cfg.weighting!r}")
    if kappa_target <= 0:
        raise DomainError("kappa_target must be positive")
    rng = np.random.default_rng(cfg.seed)
    d = space.dim
    target_sq = float(kappa_target) ** 2

    def levels(thetas):
        Q, g, V = objective_many(model, data, thetas, weight)
        return Q - q_min, Q, g, V

    probe = space.scale_unit(rng.random((B, d)))
    L_probe, *_ = levels(probe)
    kappa_sq = float(np.median(L_probe))
    if not np.isfinite(kappa_sq) or kappa_sq <= target_sq:
        kappa_sq = target_sq

    # accept-reject initialization on the first level
    draws = np.empty((B, d))
    Lv = np.empty(B)
    Qv = np.empty(B)
    gv = np.empty((B, model.d_g))
    Vv = np.empty((B, model.d_g, model.d_g))
    filled, attempts = 0, 0
    while filled < B:
        if attempts > cfg.max_retries * B:
            raise ConvergenceError(f"initial accept-reject exceeded {cfg.max_retries} tries per draw")
        m = max(B - filled, 64) * 4
        cand = space.scale_unit(rng.random((m, d)))
        attempts += m
        L, Q, g, V = levels(cand)
        ok = np.flatnonzero(L <= kappa_sq)[: B - filled]
        sl = slice(filled, filled + ok.size)
        draws[sl], Lv[sl], Qv[sl], gv[sl], Vv[sl] = cand[ok], L[ok], Q[ok], g[ok], V[ok]
        filled += ok.size
    w = np.full(B, 1.0 / B)
    schedule = [kappa_sq]
    state = PmcState(draws, w, Lv, gv, Vv, schedule, 1, cfg.K_clusters)

    while kappa_sq > target_sq:
        if state.iteration >= cfg.max_iters:
            raise ConvergenceError(
                f"PMC did not reach the target level within {cfg.max_iters} iterations",
                best=float(np.sqrt(kappa_sq)),
            )
        q60 = float(np.quantile(state.levels, 0.6))
        kappa_sq = pmc_schedule_next(kappa_sq, max(q60, np.finfo(float).tiny))
        if kappa_sq <= target_sq:
            kappa_sq = target_sq
        labels = _cluster(state.draws, cfg.K_clusters, rng)
        k = int(labels.max()) + 1
        covs = _cluster_covariances(state.draws, labels, k, cfg.cov_inflation)
        chols = np.linalg.cholesky(covs)

        new = np.empty((B, d))
        anc = np.empty(B, dtype=int)
        Lv = np.empty(B)
        Qv = np.empty(B)
        gv = np.empty((B, model.d_g))
        Vv = np.empty((B, model.d_g, model.d_g))
        pending = np.arange(B)
        tries = np.zeros(B, dtype=int)
        while pending.size:
            if np.any(tries[pending] >= cfg.max_retries):
                raise ConvergenceError(
                    f"a proposal exceeded {cfg.max_retries} retries at level {np.sqrt(kappa_sq):.4g}",
                    best=float(np.sqrt(schedule[-1])),
                )
            a = rng.choice(B, size=pending.size, p=state.weights)
            z = rng.standard_normal((pending.size, d))
            cand = state.draws[a] + np.einsum("mij,mj->mi", chols[labels[a]], z)
            tries[pending] += 1
            inside = space.contains(cand)
            ok = np.zeros(pending.size, dtype=bool)
            if inside.any():
                L, Q, g, V = levels(cand[inside])
                hit = L <= kappa_sq
                idx_inside = np.flatnonzero(inside)[hit]
                ok[idx_inside] = True
                dst = pending[idx_inside]
                new[dst], Lv[dst], Qv[dst], gv[dst], Vv[dst] = cand[idx_inside], L[hit], Q[hit], g[hit], V[hit]
                anc[dst] = a[idx_inside]
            pending = pending[~ok]

        if cfg.weighting == "mixture":
            logw = -_mixture_logpdf(new, state.draws, state.weights, labels, chols)
        else:
            logw = -_gauss_logpdf(new, state.draws[anc], chols[labels[anc]])
            if cfg.weighting == "ancestor":
                logw = logw + np.log(state.weights[anc])
        w = np.exp(logw - logw.max())
        w /= w.sum()
        schedule.append(kappa_sq)
        state = PmcState(new, w, Lv, gv, Vv, schedule, state.iteration + 1, k)
        if progress is not None:
            progress(state)
        log.debug("pmc iteration %d: kappa^2=%.4g ess=%.1f", state.iteration, kappa_sq, 1 / np.sum(w**2))

    x = kernel_argument(state.levels + q_min, q_min, np.sqrt(target_sq), "squared")
    kw = state.weights * kernel(x, kernel_kind)
    Qfinal = state.levels + q_min
    return _finalize(
        state.draws,
        Qfinal,
        state.gbar,
        state.vhat,
        kw,
        np.sqrt(target_sq),
        q_min,
        kernel_kind,
        "squared",
        n_screened=B,
        info={"kappa_schedule": np.sqrt(np.array(schedule)).tolist(), "iterations": state.iteration},
    )
