"""Run configuration schemas, dataset input and provenance-stamped output writers."""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io as _io
import json
import os
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import __version__
from .errors import QuasiJacError
from .models import Dataset, DgpSpec, MomentModel, ParameterSpace, get_model


class ConfigError(QuasiJacError):
    """Invalid or unreadable configuration (CLI exit code 2)."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DgpConfig(_Strict):
    n: int = Field(1000, ge=10)
    c: float = 10.0
    theta2_true: list[float] = Field(default_factory=lambda: [5.0])
    seed: int = Field(0, ge=0)
    options: dict[str, Any] = Field(default_factory=dict)


class SpaceConfig(_Strict):
    """Parameter box; either explicit bounds or ``halfwidth`` around the simulated truth."""

    lower: list[float] | None = None
    upper: list[float] | None = None
    halfwidth: float | None = Field(None, gt=0)
    target_indices: list[int] = Field(default_factory=lambda: [0])
    nuisance_indices: list[int] = Field(default_factory=lambda: [1])

    @model_validator(mode="after")
    def _bounds(self):
        explicit = self.lower is not None and self.upper is not None
        if explicit == (self.halfwidth is not None):
            raise ValueError("give either lower/upper bounds or halfwidth, not both")
        if (self.lower is None) != (self.upper is None):
            raise ValueError("lower and upper must be given together")
        return self


class LevelSetConfig(_Strict):
    sampler: Literal["grid", "pmc"] = "grid"
    B: int = Field(10000, ge=100)
    kernel: Literal["uniform", "epanechnikov", "cosine"] = "uniform"
    kernel_rule: Literal["squared", "root"] = "squared"
    bandwidth: float | None = Field(None, gt=0)
    cutoff: float | None = Field(None, gt=0)
    sim_ratio: float | None = Field(None, ge=0)
    pmc_clusters: int = Field(3, ge=1)
    pmc_cov_inflation: float = Field(2.0, gt=0)
    pmc_max_iters: int = Field(200, ge=1)


class InferenceConfig(_Strict):
    alpha: float = Field(0.05, gt=0, lt=1)
    theta10: list[float] | None = None
    nuisance_lower: list[float] | None = None
    nuisance_upper: list[float] | None = None
    multistart: int = Field(20, ge=1)
    grid: int = Field(201, ge=3)
    confset_method: Literal["grid", "pmc"] = "grid"
    confset_B: int = Field(20000, ge=100)


class PipelineConfig(_Strict):
    """Configuration for the ``qjac``, ``ics``, ``test`` and ``confset`` subcommands."""

    model: str = "nls_weak"
    model_options: dict[str, Any] = Field(default_factory=dict)
    dataset: str | None = None
    dgp: DgpConfig | None = None
    space: SpaceConfig = Field(default_factory=SpaceConfig)
    levelset: LevelSetConfig = Field(default_factory=LevelSetConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _source(self):
        if (self.dataset is None) == (self.dgp is None):
            raise ValueError("exactly one of 'dataset' (CSV path) or 'dgp' is required")
        if self.dataset is not None and self.space.halfwidth is not None:
            raise ValueError("space.halfwidth needs a simulated truth; give lower/upper with a dataset")
        return self


class HypothesisSpec(_Strict):
    theta10: list[float]
    alpha: float | None = Field(None, gt=0, lt=1)


def load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def parse_config(schema: type[BaseModel], raw: dict, source: str = "config"):
    from pydantic import ValidationError

    try:
        return schema.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def config_hash(cfg: BaseModel) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def wall_clock() -> str:
    """UTC timestamp; honours ``SOURCE_DATE_EPOCH`` for reproducible builds."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch else _dt.datetime.now(_dt.timezone.utc)
    return now.replace(microsecond=0).isoformat()


def provenance(cfg: BaseModel, seed: int, command: str) -> dict:
    return {
        "tool": "quasijac",
        "version": __version__,
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": int(seed),
        "wall_clock": wall_clock(),
        "config": cfg.model_dump(mode="json"),
    }


def read_dataset_csv(path) -> Dataset:
    """Header row of column names, one observation per line."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.startswith("#")) if r]
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset not found: {path}") from exc
    if len(rows) < 2:
        raise ConfigError(f"{path}: dataset needs a header and at least one row")
    header, body = rows[0], rows[1:]
    try:
        values = np.array(body, dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric entry ({exc})") from exc
    if values.ndim != 2 or values.shape[1] != len(header):
        raise ConfigError(f"{path}: ragged rows")
    try:
        return Dataset({name.strip(): values[:, j].copy() for j, name in enumerate(header)})
    except QuasiJacError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def write_dataset_csv(path, data: Dataset, columns=None):
    columns = list(columns or data.columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for i in range(data.n):
            w.writerow([repr(float(data[c][i])) for c in columns])


def build_problem(cfg: PipelineConfig, seed: int | None = None) -> tuple[MomentModel, Dataset, ParameterSpace, np.ndarray | None]:
    """Model, data, parameter box and (when simulated) the true parameter."""
    try:
        model = get_model(cfg.model, **cfg.model_options)
    except (QuasiJacError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    truth = None
    if cfg.dgp is not None:
        d = cfg.dgp
        spec = DgpSpec(cfg.model, d.n, c=d.c, theta2_true=tuple(d.theta2_true), seed=d.seed if seed is None else seed, options=d.options)
        data = model.simulate(spec)
        truth = model.true_theta(spec)
    else:
        data = read_dataset_csv(cfg.dataset)
    sp = cfg.space
    if sp.halfwidth is not None:
        lower, upper = truth - sp.halfwidth, truth + sp.halfwidth
    else:
        lower, upper = np.asarray(sp.lower, float), np.asarray(sp.upper, float)
    try:
        space = ParameterSpace(lower, upper, tuple(sp.target_indices), tuple(sp.nuisance_indices))
    except QuasiJacError as exc:
        raise ConfigError(f"space: {exc}") from exc
    if space.dim != model.d_theta:
        raise ConfigError(f"space has {space.dim} coordinates but model {cfg.model!r} has {model.d_theta}")
    try:
        model.evaluate(space.lower, data)
    except KeyError as exc:
        raise ConfigError(f"dataset lacks column {exc} required by model {cfg.model!r}") from exc
    return model, data, space, truth


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path, header, rows, prov: dict | None = None):
    """CSV with ``#``-prefixed provenance lines (wall clock on its own line)."""
    buf = _io.StringIO()
    if prov is not None:
        stamp = {k: v for k, v in prov.items() if k not in ("wall_clock", "config")}
        buf.write("# provenance: " + json.dumps(stamp, sort_keys=True) + "\n")
        buf.write("# wall_clock: " + prov["wall_clock"] + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue())


def write_json(path, payload: dict, prov: dict | None = None):
    doc = dict(payload)
    if prov is not None:
        doc["provenance"] = prov
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def read_csv_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    return rows[0], rows[1:]
