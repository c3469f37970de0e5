"""Command-line interface.

Subcommands: ``qjac``, ``ics``, ``test``, ``confset``, ``mc`` and
``ho-scaling``.  Global flags ``--config``, ``--seed``, ``--threads`` and
``--out`` may appear before or after the subcommand.  Exit codes: 0 success,
1 internal error, 2 configuration error, 3 degenerate level set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import __version__
from .errors import ConvergenceError, DegenerateSampleError, FlooringWarning
from .ics import select_category, singular_values_sorted
from .inference import ArOptimizer, ar_statistic, ar_test, confidence_set
from .io import (
    ConfigError,
    HypothesisSpec,
    PipelineConfig,
    build_problem,
    load_json,
    parse_config,
    provenance,
    write_csv,
    write_json,
)
from .levelset import PmcConfig, compute_bandwidth, compute_cutoff, pmc_sample, screen_grid
from .mcstudy import (
    ExperimentConfig,
    ExperimentError,
    ROW_FIELDS,
    run_higher_order_experiment,
    run_ics_experiment,
    run_power_experiment,
    run_size_experiment,
    stderr_progress,
)
from .qjac import fit_ls, normalized_matrix

log = logging.getLogger("quasijac")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DEGENERATE = 0, 1, 2, 3
EXAMPLE_CONFIG = Path(__file__).with_name("data") / "nls_example.json"


class HoScalingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: str = "cubic"
    n: int = Field(10**6, ge=10)
    reps: int = Field(20, ge=1)
    kappa_max: float = Field(0.3, gt=0)
    kappa_min: float = Field(0.003, gt=0)
    kappa_num: int = Field(9, ge=2)
    B: int = Field(10000, ge=100)
    halfwidth: float = Field(1.0, gt=0)
    seed: int = Field(0, ge=0)


# ---------------------------------------------------------------------------
# pipeline pieces
# ---------------------------------------------------------------------------


def _pipeline_config(args) -> PipelineConfig:
    path = args.config or EXAMPLE_CONFIG
    cfg = parse_config(PipelineConfig, load_json(path), str(path))
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": int(args.seed)})
    if cfg.dataset is not None and not os.path.isabs(cfg.dataset) and args.config:
        cfg = cfg.model_copy(update={"dataset": str(Path(args.config).parent / cfg.dataset)})
    return cfg


def _level_set(cfg: PipelineConfig, model, data, space):
    ls = cfg.levelset
    kappa = ls.bandwidth or compute_bandwidth(data.n, ls.sim_ratio)
    if ls.sampler == "grid":
        return screen_grid(model, data, space, ls.B, kappa, ls.kernel, cfg.seed, rule=ls.kernel_rule)
    q_min = screen_grid(model, data, space, max(ls.B // 4, 100), 1e6, seed=cfg.seed).q_min
    pmc = PmcConfig(ls.pmc_clusters, ls.pmc_cov_inflation, ls.pmc_max_iters, seed=cfg.seed)
    return pmc_sample(model, data, space, kappa, ls.B, pmc, q_min=q_min, kernel_kind=ls.kernel)


def _identify(cfg: PipelineConfig, model, data, space):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", FlooringWarning)
        sample = _level_set(cfg, model, data, space)
        qj = fit_ls(sample, data.n)
        M = normalized_matrix(qj, space)
    for w in caught:
        log.warning("%s", w.message)
    cutoff = cfg.levelset.cutoff or compute_cutoff(data.n, cfg.levelset.sim_ratio)
    ics = select_category(singular_values_sorted(M), cutoff, space.d_theta1, space.d_theta2)
    return sample, qj, ics


def _ics_table(ics) -> str:
    lines = [f"{'j':>3} {'block':>9} {'singular value':>15} {'> cutoff':>9}"]
    for j, v in enumerate(ics.singular_values, 1):
        block = "target" if j <= ics.d_theta1 else "nuisance"
        above = "yes" if (j > ics.d_theta1 and v > ics.cutoff) else "no"
        lines.append(f"{j:>3} {block:>9} {v:>15.6g} {above:>9}")
    lines.append(f"cutoff = {ics.cutoff:.6g}; d_hat = {ics.d_hat} of {ics.d_theta2} nuisance directions")
    return "\n".join(lines)


def _ar_space(cfg: PipelineConfig, space):
    inf = cfg.inference
    if inf.nuisance_lower is None and inf.nuisance_upper is None:
        return space
    lo = inf.nuisance_lower if inf.nuisance_lower is not None else space.lower[list(space.nuisance_indices)]
    hi = inf.nuisance_upper if inf.nuisance_upper is not None else space.upper[list(space.nuisance_indices)]
    return space.with_nuisance_bounds(lo, hi)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_qjac(args) -> int:
    cfg = _pipeline_config(args)
    model, data, space, _ = build_problem(cfg)
    sample, qj, ics = _identify(cfg, model, data, space)
    prov = provenance(cfg, cfg.seed, "qjac")
    out = _out(args)
    write_json(out / "qjac.json", {"quasi_jacobian": qj.to_dict(), "n_draws": sample.size, "q_min": sample.q_min}, prov)
    header = [f"theta_{j + 1}" for j in range(sample.dim)] + ["objective", "weight"]
    rows = [[*d, q, w] for d, q, w in zip(sample.draws, sample.objectives, sample.weights)]
    write_csv(out / "levelset.csv", header, rows, prov)
    _write_sv_table(out / "singular_values.csv", ics, prov)
    print(_ics_table(ics))
    return EXIT_OK


def _write_sv_table(path, ics, prov):
    rows = []
    for j, v in enumerate(ics.singular_values, 1):
        block = "target" if j <= ics.d_theta1 else "nuisance"
        rows.append([j, block, v, ics.cutoff, j > ics.d_theta1 and v > ics.cutoff])
    write_csv(path, ["index", "block", "singular_value", "cutoff", "above_cutoff"], rows, prov)


def cmd_ics(args) -> int:
    cfg = _pipeline_config(args)
    model, data, space, _ = build_problem(cfg)
    _, _, ics = _identify(cfg, model, data, space)
    prov = provenance(cfg, cfg.seed, "ics")
    out = _out(args)
    write_json(out / "ics.json", {"ics": ics.to_dict()}, prov)
    _write_sv_table(out / "singular_values.csv", ics, prov)
    print(_ics_table(ics))
    return EXIT_OK


def cmd_test(args) -> int:
    cfg = _pipeline_config(args)
    inf = cfg.inference
    theta10, alpha = inf.theta10, inf.alpha
    if args.hypothesis:
        hyp = parse_config(HypothesisSpec, load_json(args.hypothesis), args.hypothesis)
        theta10 = hyp.theta10
        alpha = hyp.alpha or alpha
    if args.theta10:
        theta10 = [float(x) for x in args.theta10.split(",")]
    model, data, space, truth = build_problem(cfg)
    if theta10 is None:
        if truth is None:
            raise ConfigError("no hypothesis: give --theta10, --hypothesis or inference.theta10")
        theta10 = list(truth[list(space.target_indices)])
    if len(theta10) != space.d_theta1:
        raise ConfigError(f"theta10 has {len(theta10)} entries, expected {space.d_theta1}")
    _, _, ics = _identify(cfg, model, data, space)
    ar = ar_statistic(model, data, theta10, _ar_space(cfg, space), ArOptimizer(inf.multistart, inf.grid))
    res = ar_test(ar.value, model.d_g, ics.d_hat, alpha, theta10, ar.argmin)
    prov = provenance(cfg, cfg.seed, "test")
    write_json(_out(args) / "test.json", {"test": res.to_dict(), "ics": ics.to_dict()}, prov)
    verdict = "reject" if res.reject else "accept"
    print(f"AR = {res.ar_stat:.6g}, df = {res.df}, critical = {res.critical:.6g}: {verdict}")
    return EXIT_OK


def cmd_confset(args) -> int:
    cfg = _pipeline_config(args)
    inf = cfg.inference
    model, data, space, _ = build_problem(cfg)
    _, _, ics = _identify(cfg, model, data, space)
    cs = confidence_set(model, data, space, inf.alpha, ics.d_hat, inf.confset_method, inf.confset_B, seed=cfg.seed)
    prov = provenance(cfg, cfg.seed, "confset")
    out = _out(args)
    t_names = [f"theta1_{j + 1}" for j in range(space.d_theta1)]
    w_names = [f"witness_{j + 1}" for j in range(space.dim)]
    rows = [[*a, *w, s] for a, w, s in zip(cs.accepted, cs.witnesses, cs.statistics)]
    write_csv(out / "confset.csv", t_names + w_names + ["statistic"], rows, prov)
    hull = cs.hull if cs.hull is not None else np.empty((0, space.d_theta1))
    write_csv(out / "confset_hull.csv", t_names, hull.tolist(), prov)
    if cs.empty:
        print("confidence set is empty")
    elif space.d_theta1 == 1:
        print(f"{cs.level:.0%} confidence set for theta1: [{hull[0, 0]:.6g}, {hull[1, 0]:.6g}] ({len(rows)} points, d_hat = {cs.d_hat_used})")
    else:
        print(f"{cs.level:.0%} confidence set: {len(rows)} accepted points, {hull.shape[0]} hull vertices")
    return EXIT_OK


def _mc_config(args) -> ExperimentConfig:
    raw = load_json(args.config) if args.config else {}
    raw.pop("experiment", None)
    cfg = parse_config(ExperimentConfig, raw, args.config or "defaults")
    if args.seed is not None:
        cfg = cfg.model_copy(update={"master_seed": int(args.seed)})
    if args.reps is not None:
        cfg = parse_config(ExperimentConfig, {**cfg.model_dump(), "reps": args.reps}, "--reps")
    return cfg


def cmd_mc(args) -> int:
    cfg = _mc_config(args)
    exp = args.experiment
    if exp == "power" and len(cfg.a_grid) < 2:
        raise ConfigError("power experiment needs an a_grid with at least two values")
    if args.dry_run:
        a_count = len(cfg.a_grid) if exp == "power" else 1
        print(f"experiment: {exp}")
        print(f"c_grid: {cfg.c_grid}")
        print(f"a_grid: {cfg.a_grid if exp == 'power' else [0.0]}")
        print(f"methods: {cfg.methods}")
        print(f"replications: {len(cfg.c_grid) * cfg.reps} ({cfg.reps} per c), AR evaluations: {len(cfg.c_grid) * cfg.reps * a_count}")
        print(f"n={cfg.n}, B_grid={cfg.B_grid}, master_seed={cfg.master_seed}, threads={args.threads or 'env/1'}")
        return EXIT_OK
    runner = {"size": run_size_experiment, "ics": run_ics_experiment, "power": run_power_experiment}[exp]
    out = _out(args)
    prov = provenance(cfg, cfg.master_seed, f"mc {exp}")
    try:
        result = runner(cfg, threads=args.threads, progress=stderr_progress(exp))
    except ExperimentError as exc:
        _write_rows(out / f"mc_{exp}.csv", exc.rows, prov)
        raise
    _write_rows(out / f"mc_{exp}.csv", result.rows, prov)
    _write_panels(out, exp, result, prov, figures=not args.no_figures)
    print(f"{exp}: {len(result.rows)} rows in {result.wall_seconds:.1f}s -> {out / f'mc_{exp}.csv'}", file=sys.stderr)
    return EXIT_OK


def _write_rows(path, rows, prov):
    write_csv(path, list(ROW_FIELDS), [[getattr(r, k) for k in ROW_FIELDS] for r in rows], prov)


def _write_panels(out: Path, exp: str, result, prov, figures: bool):
    from . import plotting

    rows = result.rows
    cfg = result.config
    if exp in ("size", "ics"):
        if exp == "size":
            write_csv(out / "fig_size.csv", ["c", "method", "reject_rate", "mc_se"], [[r.c, r.method, r.reject_rate, r.mc_se] for r in rows], prov)
            if figures:
                plotting.plot_rejection(rows, out / "fig_size.png", cfg.alpha)
        below = [r for r in rows if r.ics_below_rate is not None]
        write_csv(out / "fig_ics_below.csv", ["c", "method", "ics_below_rate"], [[r.c, r.method, r.ics_below_rate] for r in below], prov)
        cutoff = compute_cutoff(cfg.n, cfg.sim_ratio)
        qrows = []
        for c in cfg.c_grid:
            for method in ("ac12", "ics_normalized", "ics_unnormalized"):
                vals = np.array([o.ics[method] for o in result.outcomes if o.c == c and o.error is None and method in o.ics])
                if vals.size:
                    lv = np.log1p(vals)
                    qrows.append([c, method, *np.quantile(lv, [0.05, 0.25, 0.5, 0.75, 0.95]), lv.mean(), np.log1p(cutoff)])
        write_csv(out / "fig_ics_log1p.csv", ["c", "method", "q05", "q25", "q50", "q75", "q95", "mean", "cutoff_log1p"], qrows, prov)
        if figures:
            plotting.plot_ics_below(rows, out / "fig_ics_below.png")
            plotting.plot_ics_distribution(qrows, out / "fig_ics_log1p.png", float(np.log1p(cutoff)))
    else:
        write_csv(out / "fig_power.csv", ["c", "a", "method", "reject_rate", "mc_se"], [[r.c, r.a, r.method, r.reject_rate, r.mc_se] for r in rows], prov)
        if figures:
            for c in cfg.c_grid:
                plotting.plot_power(rows, out / f"fig_power_c{c:g}.png", c, cfg.alpha)


def cmd_ho_scaling(args) -> int:
    raw = load_json(args.config) if args.config else {}
    cfg = parse_config(HoScalingConfig, raw, args.config or "defaults")
    updates = {k: v for k, v in {"model": args.model, "reps": args.reps}.items() if v is not None}
    if args.seed is not None:
        updates["seed"] = int(args.seed)
    if updates:
        cfg = parse_config(HoScalingConfig, {**cfg.model_dump(), **updates}, "flags")
    if cfg.kappa_min >= cfg.kappa_max:
        raise ConfigError("kappa_min must be below kappa_max")
    kappas = np.geomspace(cfg.kappa_max, cfg.kappa_min, cfg.kappa_num)
    try:
        res = run_higher_order_experiment(kappas, cfg.reps, cfg.seed, model=cfg.model, n=cfg.n, B=cfg.B, halfwidth=cfg.halfwidth)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    prov = provenance(cfg, cfg.seed, "ho-scaling")
    out = _out(args)
    fitted = np.exp(res.intercept) * res.kappas**res.slope
    write_csv(out / "ho_scaling.csv", ["kappa", "median_sigma_min", "fitted"], np.column_stack([res.kappas, res.median_sigma_min, fitted]).tolist(), prov)
    write_json(out / "ho_scaling.json", {"slope": res.slope, "intercept": res.intercept, "residual_sd": res.residual_sd, "dropped": res.dropped}, prov)
    if not args.no_figures:
        from . import plotting

        keep = np.isfinite(res.median_sigma_min)
        plotting.plot_scaling(res.kappas[keep], res.median_sigma_min[keep], res.slope, res.intercept, out / "ho_scaling.png")
    print(f"slope of log sigma_min on log kappa: {res.slope:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=default, help="JSON run configuration")
    p.add_argument("--seed", type=int, metavar="U64", default=default, help="master seed (overrides config)")
    p.add_argument("--threads", type=int, metavar="N", default=default, help="worker processes (overrides QUASIJAC_THREADS)")
    p.add_argument("--out", metavar="DIR", default=default, help="output directory (default: current)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quasijac", description=__doc__.split("\n\n")[0], parents=[_global_flags(False)])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    flags = _global_flags(True)

    p = sub.add_parser("qjac", parents=[flags], help="fit the quasi-Jacobian and write it with the level set")
    p.set_defaults(func=cmd_qjac)
    p = sub.add_parser("ics", parents=[flags], help="identification category selection")
    p.set_defaults(func=cmd_ics)
    p = sub.add_parser("test", parents=[flags], help="subvector AR test with data-driven degrees of freedom")
    p.add_argument("--theta10", help="comma-separated hypothesized target value")
    p.add_argument("--hypothesis", metavar="PATH", help="JSON file with theta10 (and optional alpha)")
    p.set_defaults(func=cmd_test)
    p = sub.add_parser("confset", parents=[flags], help="confidence set by test inversion")
    p.set_defaults(func=cmd_confset)
    p = sub.add_parser("mc", parents=[flags], help="Monte Carlo experiments")
    p.add_argument("--experiment", choices=("size", "ics", "power"), default="size")
    p.add_argument("--reps", type=int, help="replications per c (overrides config)")
    p.add_argument("--dry-run", action="store_true", help="validate the configuration and print the plan")
    p.add_argument("--no-figures", action="store_true", help="write CSV panels only")
    p.set_defaults(func=cmd_mc)
    p = sub.add_parser("ho-scaling", parents=[flags], help="singular-value scaling under higher-order identification")
    p.add_argument("--model", choices=("cubic", "linear_iv"))
    p.add_argument("--reps", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_ho_scaling)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    start = time.time()
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateSampleError as exc:
        print(f"degenerate level set: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ExperimentError, ConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    log.debug("%s finished in %.2fs", args.command, time.time() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
