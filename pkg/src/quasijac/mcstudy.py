"""Monte Carlo experiments for the weak-identification NLS design.

Each replication simulates a dataset, screens the level set on a scrambled
Sobol grid around the truth, fits the quasi-Jacobian and computes every
identification statistic once; the AR statistic is then evaluated at each
hypothesized value ``theta1_n + a / sqrt(n)``.  Replications are seeded from
``(master_seed, round(1000 c), rep)`` so the ``a = 0`` column of a power run
reproduces the size run bit for bit, and results do not depend on the
number of workers.
"""

from __future__ import annotations

import logging
import math
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import FlooringWarning, QuasiJacError, SingularVarianceError
from .ics import select_category, singular_values_sorted
from .inference import ArOptimizer, ac12_test, ar_statistic, ar_test, fd_jacobian, projection_test, wald_test
from .levelset import compute_bandwidth, compute_cutoff, screen_grid
from .models import DgpSpec, LinearIVModel, ParameterSpace, PolynomialModel, get_model
from .numerics import seed_sequence
from .qjac import fit_ls, normalized_matrix, sandwich_variance

log = logging.getLogger(__name__)

METHODS = ("wald", "projection", "ac12", "ics_normalized", "ics_unnormalized")
ICS_METHODS = ("ac12", "ics_normalized", "ics_unnormalized")
ROW_FIELDS = ("method", "c", "a", "reps", "reject_rate", "mc_se", "ics_below_rate", "mean_log1p_ics")


class ExperimentError(QuasiJacError):
    """Too many replications failed; ``rows`` holds the table computed anyway."""

    def __init__(self, message, rows=None):
        super().__init__(message)
        self.rows = rows or []


class ExperimentConfig(BaseModel):
    """Settings shared by the size, ICS and power experiments."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    model_name: Literal["nls_weak"] = "nls_weak"
    n: int = Field(1000, ge=10)
    reps: int = Field(1000, ge=100)
    c_grid: list[float] = Field(default_factory=lambda: [float(c) for c in range(11)])
    a_grid: list[float] = Field(default_factory=lambda: [0.0])
    alpha: float = Field(0.05, gt=0, lt=1)
    methods: list[str] = Field(default_factory=lambda: list(METHODS))
    B_grid: int = Field(10000, ge=100)
    master_seed: int = Field(20240611, ge=0)
    theta2_true: float = 5.0
    box_halfwidth: float = Field(1.0, gt=0)
    ar_nuisance_range: tuple[float, float] = (-20.0, 20.0)
    kernel: Literal["uniform", "epanechnikov", "cosine"] = "uniform"
    kernel_rule: Literal["squared", "root"] = "squared"
    moment_form: Literal["residual", "text"] = "residual"
    benchmark_jacobian: Literal["qjac", "fd"] = "qjac"
    sim_ratio: float | None = None
    ar_multistart: int = Field(20, ge=1)
    ar_grid: int = Field(201, ge=3)
    failure_threshold: float = Field(0.01, ge=0, le=1)

    @field_validator("c_grid")
    @classmethod
    def _nonnegative(cls, v):
        if not v or any(c < 0 for c in v):
            raise ValueError("c_grid must be a nonempty list of nonnegative values")
        return v

    @field_validator("methods")
    @classmethod
    def _known(cls, v):
        bad = sorted(set(v) - set(METHODS))
        if bad or not v:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        return v

    @model_validator(mode="after")
    def _range(self):
        lo, hi = self.ar_nuisance_range
        if not lo < hi:
            raise ValueError("ar_nuisance_range must be increasing")
        return self


@dataclass
class ExperimentRow:
    method: str
    c: float
    a: float
    reps: int
    reject_rate: float
    mc_se: float
    ics_below_rate: float | None = None
    mean_log1p_ics: float | None = None

    def as_record(self) -> dict:
        return asdict(self)


@dataclass
class ReplicationOutcome:
    """Per-replication decisions keyed by ``(method, a)`` plus ICS statistics by method."""

    c: float
    rep: int
    rejects: dict = field(default_factory=dict)
    ics: dict = field(default_factory=dict)
    error: str | None = None


@dataclass
class ExperimentResult:
    rows: list[ExperimentRow]
    outcomes: list[ReplicationOutcome]
    config: ExperimentConfig
    failures: dict
    wall_seconds: float

    def row(self, method: str, c: float, a: float = 0.0) -> ExperimentRow:
        for r in self.rows:
            if r.method == method and math.isclose(r.c, c) and math.isclose(r.a, a):
                return r
        raise KeyError((method, c, a))


def replication_seeds(master_seed: int, c: float, rep: int) -> tuple[int, int]:
    """``(data_seed, scramble_seed)`` for one replication."""
    state = seed_sequence(master_seed, int(round(1000 * c)), rep).generate_state(2, dtype=np.uint32)
    return int(state[0]), int(state[1])


def run_replication(cfg: ExperimentConfig, c: float, rep: int) -> ReplicationOutcome:
    out = ReplicationOutcome(c=float(c), rep=int(rep))
    try:
        _replicate(cfg, c, rep, out)
    except (QuasiJacError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        out.error = f"{type(exc).__name__}: {exc}"
        out.rejects.clear()
    return out


def _replicate(cfg: ExperimentConfig, c: float, rep: int, out: ReplicationOutcome):
    n = cfg.n
    data_seed, scramble_seed = replication_seeds(cfg.master_seed, c, rep)
    spec = DgpSpec("nls_weak", n, c=c, theta2_true=(cfg.theta2_true,), seed=data_seed)
    model = get_model("nls_weak", form=cfg.moment_form)
    data = model.simulate(spec)
    truth = model.true_theta(spec)
    space = ParameterSpace(truth - cfg.box_halfwidth, truth + cfg.box_halfwidth, (0,), (1,))
    kappa = compute_bandwidth(n, cfg.sim_ratio)
    cutoff = compute_cutoff(n, cfg.sim_ratio)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FlooringWarning)
        sample = screen_grid(model, data, space, cfg.B_grid, kappa, cfg.kernel, scramble_seed, rule=cfg.kernel_rule)
        qj = fit_ls(sample, n)
        sv_norm = singular_values_sorted(normalized_matrix(qj, space))
        sv_raw = singular_values_sorted(normalized_matrix(qj, space, normalize_sigma=False))
    ics_norm = select_category(sv_norm, cutoff, 1, 1)
    ics_raw = select_category(sv_raw, cutoff, 1, 1)

    theta_hat = sample.theta_min
    ev = model.evaluate(theta_hat, data)
    weight = np.linalg.inv(ev.vhat)
    slope = qj.slope_B if cfg.benchmark_jacobian == "qjac" else fd_jacobian(model, data, theta_hat)
    try:
        variance = sandwich_variance(slope, ev.vhat, weight, n)
    except SingularVarianceError:
        variance = None

    out.ics["ics_normalized"] = float(sv_norm[-1])
    out.ics["ics_unnormalized"] = float(sv_raw[-1])
    ar_space = space.with_nuisance_bounds([cfg.ar_nuisance_range[0]], [cfg.ar_nuisance_range[1]])
    opt = ArOptimizer(multistart=cfg.ar_multistart, grid_fallback=cfg.ar_grid)
    d_g = model.d_g
    for a in cfg.a_grid:
        theta10 = truth[:1] + a / math.sqrt(n)
        ar = ar_statistic(model, data, theta10, ar_space, opt).value
        for method in cfg.methods:
            if method == "projection":
                rej = projection_test(ar, d_g, cfg.alpha).reject
            elif method == "ics_normalized":
                rej = ar_test(ar, d_g, ics_norm.d_hat, cfg.alpha).reject
            elif method == "ics_unnormalized":
                rej = ar_test(ar, d_g, ics_raw.d_hat, cfg.alpha).reject
            elif method == "ac12":
                dec = ac12_test(ar, d_g, 1, theta_hat, variance, n, cutoff, cfg.alpha)
                out.ics["ac12"] = dec.info["ics"]
                rej = dec.reject
            else:
                dec = wald_test(theta_hat, theta10, variance, cfg.alpha)
                rej = dec.reject if dec.applicable else None
            out.rejects[(method, float(a))] = rej


def _run_chunk(args):
    cfg_json, tasks = args
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    return [run_replication(cfg, c, rep) for c, rep in tasks]


def default_threads() -> int:
    env = os.environ.get("QUASIJAC_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def run_replications(cfg: ExperimentConfig, threads: int | None = None, progress=None) -> list[ReplicationOutcome]:
    """All ``(c, rep)`` replications; order of the returned list is canonical."""
    threads = threads or default_threads()
    tasks = [(float(c), rep) for c in cfg.c_grid for rep in range(cfg.reps)]
    total = len(tasks)
    results: list[ReplicationOutcome] = []
    if threads <= 1:
        for i, (c, rep) in enumerate(tasks, 1):
            results.append(run_replication(cfg, c, rep))
            if progress is not None:
                progress(i, total)
    else:
        chunk = max(1, min(50, total // (threads * 4) or 1))
        groups = [tasks[i : i + chunk] for i in range(0, total, chunk)]
        payload = cfg.model_dump_json()
        done = 0
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for batch in pool.map(_run_chunk, [(payload, g) for g in groups]):
                results.extend(batch)
                done += len(batch)
                if progress is not None:
                    progress(done, total)
    results.sort(key=lambda o: (o.c, o.rep))
    return results


def stderr_progress(label: str, every: float = 5.0):
    """Progress callback writing a line to standard error at most every ``every`` seconds."""
    start = time.monotonic()
    last = [start - every]

    def report(done, total):
        now = time.monotonic()
        if done == total or now - last[0] >= every:
            last[0] = now
            rate = done / max(now - start, 1e-9)
            eta = (total - done) / rate if rate > 0 else float("inf")
            print(f"[{label}] {done}/{total} replications, {rate:.1f}/s, eta {eta:.0f}s", file=sys.stderr, flush=True)

    return report


def aggregate(cfg: ExperimentConfig, outcomes: list[ReplicationOutcome]) -> tuple[list[ExperimentRow], dict]:
    """One row per ``(method, c, a)``; failures counted per ``c``."""
    cutoff = compute_cutoff(cfg.n, cfg.sim_ratio)
    rows, failures = [], {}
    for c in cfg.c_grid:
        ok = [o for o in outcomes if math.isclose(o.c, c) and o.error is None]
        failures[float(c)] = sum(1 for o in outcomes if math.isclose(o.c, c) and o.error is not None)
        for a in cfg.a_grid:
            for method in cfg.methods:
                decisions = [o.rejects.get((method, float(a))) for o in ok]
                decisions = [d for d in decisions if d is not None]
                reps = len(decisions)
                r = float(np.mean(decisions)) if reps else float("nan")
                se = math.sqrt(r * (1 - r) / reps) if reps else float("nan")
                below = log1p = None
                if method in ICS_METHODS:
                    stats = np.array([o.ics[method] for o in ok if method in o.ics])
                    if stats.size:
                        below = float(np.mean(stats <= cutoff))
                        log1p = float(np.mean(np.log1p(stats)))
                rows.append(ExperimentRow(method, float(c), float(a), reps, r, se, below, log1p))
    return rows, failures


def _run(cfg: ExperimentConfig, threads, progress, label) -> ExperimentResult:
    start = time.time()
    if progress is True:
        progress = stderr_progress(label)
    outcomes = run_replications(cfg, threads, progress or None)
    rows, failures = aggregate(cfg, outcomes)
    for o in outcomes:
        if o.error:
            log.warning("replication c=%s rep=%d failed: %s", o.c, o.rep, o.error)
    result = ExperimentResult(rows, outcomes, cfg, failures, time.time() - start)
    bad = {c: k for c, k in failures.items() if k > cfg.failure_threshold * cfg.reps}
    if bad:
        raise ExperimentError(f"failed replications above {cfg.failure_threshold:.0%} at c={sorted(bad)}", rows)
    return result


def run_size_experiment(config: ExperimentConfig, threads: int | None = None, progress=None) -> ExperimentResult:
    """Rejection rates at the true value ``theta1_n = c / sqrt(n)``."""
    if list(config.a_grid) != [0.0]:
        config = config.model_copy(update={"a_grid": [0.0]})
    return _run(config, threads, progress, "size")


def run_ics_experiment(config: ExperimentConfig, threads: int | None = None, progress=None) -> ExperimentResult:
    """ICS diagnostics (below-cutoff rate, mean log(1 + ICS)) for the three selection rules."""
    methods = [m for m in config.methods if m in ICS_METHODS] or list(ICS_METHODS)
    config = config.model_copy(update={"a_grid": [0.0], "methods": methods})
    return _run(config, threads, progress, "ics")


def run_power_experiment(config: ExperimentConfig, threads: int | None = None, progress=None) -> ExperimentResult:
    """Rejection rates against local alternatives ``theta1_n + a / sqrt(n)``."""
    if len(config.a_grid) < 2:
        raise ValueError("power experiment needs a nontrivial a_grid")
    return _run(config, threads, progress, "power")


@dataclass
class ScalingResult:
    kappas: np.ndarray
    median_sigma_min: np.ndarray
    slope: float
    intercept: float
    residual_sd: float
    dropped: list


def run_higher_order_experiment(
    kappa_grid=None,
    reps: int = 20,
    seed: int = 0,
    *,
    model: str = "cubic",
    n: int = 10**6,
    B: int = 10000,
    halfwidth: float = 1.0,
) -> ScalingResult:
    """Log-log slope of the median smallest singular value of the LS slope on the bandwidth.

    ``model="cubic"`` has moments ``mean(u) + (theta - theta0)^3``; the
    linear IV model serves as a control with a constant slope.  Each
    replication screens ``B`` Sobol points on ``theta0 +- halfwidth`` at
    every bandwidth.  Bandwidths whose level set is degenerate are dropped
    with a warning.
    """
    kappas = np.geomspace(0.3, 0.003, 9) if kappa_grid is None else np.asarray(kappa_grid, dtype=float)
    mdl = PolynomialModel(3) if model == "cubic" else LinearIVModel(1) if model == "linear_iv" else None
    if mdl is None:
        raise ValueError(f"unsupported scaling model {model!r}")
    table = np.full((reps, kappas.size), np.nan)
    for rep in range(reps):
        data_seed, scramble = (int(s) for s in seed_sequence(seed, rep).generate_state(2, dtype=np.uint32))
        spec = DgpSpec(mdl.name, n, seed=data_seed, theta2_true=(0.0,))
        data = mdl.simulate(spec)
        t0 = mdl.true_theta(spec)
        space = ParameterSpace(t0 - halfwidth, t0 + halfwidth, (), tuple(range(mdl.d_theta)))
        for j, k in enumerate(kappas):
            try:
                s = screen_grid(mdl, data, space, B, float(k), seed=scramble)
                B_ls = fit_ls(s).slope_B
                table[rep, j] = np.linalg.svd(B_ls, compute_uv=False).min()
            except QuasiJacError as exc:
                log.debug("kappa=%g rep=%d dropped: %s", k, rep, exc)
    med = np.array([np.nanmedian(col) if np.isfinite(col).any() else np.nan for col in table.T])
    keep = np.isfinite(med) & (med > 0)
    dropped = kappas[~keep].tolist()
    if dropped:
        warnings.warn(f"degenerate level sets at kappa={dropped} dropped", RuntimeWarning, stacklevel=2)
    x, y = np.log(kappas[keep]), np.log(med[keep])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (intercept + slope * x)
    return ScalingResult(kappas, med, float(slope), float(intercept), float(resid.std()), dropped)
