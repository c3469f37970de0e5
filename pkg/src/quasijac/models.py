"""Moment-condition models and their data-generating processes.

A model maps a parameter vector and a dataset to the sample mean of the
moment contributions (``gbar``) and their sample covariance (``vhat``, with
an ``n - 1`` denominator).  Every model also offers ``evaluate_many`` for a
stack of parameter vectors; the built-in models implement it from
precomputed sufficient statistics so that screening ten thousand draws costs
about as much as one pass over the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError
from .numerics import seed_sequence


@dataclass(frozen=True)
class ParameterSpace:
    """Box ``[lower, upper]`` split into target (theta_1) and nuisance (theta_2) coordinates."""

    lower: np.ndarray
    upper: np.ndarray
    target_indices: tuple[int, ...]
    nuisance_indices: tuple[int, ...]

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "target_indices", tuple(int(i) for i in self.target_indices))
        object.__setattr__(self, "nuisance_indices", tuple(int(i) for i in self.nuisance_indices))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise DomainError("lower and upper must be vectors of equal length")
        if not np.all(lower < upper):
            raise DomainError("lower must be strictly below upper in every coordinate")
        idx = sorted(self.target_indices + self.nuisance_indices)
        if idx != list(range(lower.size)):
            raise DomainError("target and nuisance indices must partition the coordinates")

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def d_theta1(self) -> int:
        return len(self.target_indices)

    @property
    def d_theta2(self) -> int:
        return len(self.nuisance_indices)

    def nuisance_projector(self) -> np.ndarray:
        """Diagonal 0/1 matrix keeping the nuisance coordinates."""
        P = np.zeros((self.dim, self.dim))
        for i in self.nuisance_indices:
            P[i, i] = 1.0
        return P

    def scale_unit(self, u) -> np.ndarray:
        """Map points of the unit cube into the box."""
        return self.lower + np.asarray(u) * (self.upper - self.lower)

    def contains(self, theta) -> np.ndarray:
        theta = np.asarray(theta)
        return np.all((theta >= self.lower) & (theta <= self.upper), axis=-1)

    def assemble(self, theta1, theta2) -> np.ndarray:
        """Full parameter vector(s) from target and nuisance parts (broadcast over leading axes)."""
        theta1 = np.asarray(theta1, dtype=float)
        theta2 = np.asarray(theta2, dtype=float)
        lead = np.broadcast_shapes(theta1.shape[:-1], theta2.shape[:-1])
        out = np.empty(lead + (self.dim,))
        out[..., list(self.target_indices)] = np.broadcast_to(theta1, lead + (self.d_theta1,))
        out[..., list(self.nuisance_indices)] = np.broadcast_to(theta2, lead + (self.d_theta2,))
        return out

    def with_nuisance_bounds(self, lower2, upper2) -> "ParameterSpace":
        lower = self.lower.copy()
        upper = self.upper.copy()
        lower[list(self.nuisance_indices)] = lower2
        upper[list(self.nuisance_indices)] = upper2
        return ParameterSpace(lower, upper, self.target_indices, self.nuisance_indices)


@dataclass(frozen=True)
class MomentEvaluation:
    gbar: np.ndarray
    vhat: np.ndarray


@dataclass
class Dataset:
    """Named columns of equal length ``n``."""

    columns: dict[str, np.ndarray]

    def __post_init__(self):
        self.columns = {k: np.asarray(v, dtype=float) for k, v in self.columns.items()}
        lengths = {v.shape[0] for v in self.columns.values()}
        if len(lengths) != 1:
            raise DomainError("all dataset columns must have the same length")
        if self.n < 2:
            raise DomainError("dataset needs at least two observations")
        self._cache = {}

    @property
    def n(self) -> int:
        return next(iter(self.columns.values())).shape[0]

    def __getitem__(self, key) -> np.ndarray:
        return self.columns[key]

    def cached(self, key, factory):
        """Memoize derived statistics on the dataset (models are stateless)."""
        if key not in self._cache:
            self._cache[key] = factory()
        return self._cache[key]


@dataclass(frozen=True)
class DgpSpec:
    model_name: str
    n: int
    c: float = 0.0
    theta2_true: tuple[float, ...] = (5.0,)
    seed: int = 0
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 10:
            raise DomainError("DGP sample size must be at least 10")
        object.__setattr__(self, "theta2_true", tuple(np.atleast_1d(self.theta2_true).astype(float)))


def _rng(spec: DgpSpec) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(spec.seed))


def _moments_from_contributions(contrib: np.ndarray) -> MomentEvaluation:
    """Mean and (n-1)-denominator covariance of per-observation contributions (n, d_g)."""
    gbar = contrib.mean(axis=0)
    centered = contrib - gbar
    vhat = centered.T @ centered / (contrib.shape[0] - 1)
    return MomentEvaluation(gbar, 0.5 * (vhat + vhat.T))


def _quadratic_residual_moments(M1, M2, gamma, n):
    """Moments of ``z * (gamma' w)`` from first/second-order cross moments.

    ``M1[p, k] = mean(w_p z_k)`` and ``M2[p, q, k, l] = mean(w_p w_q z_k z_l)``;
    ``gamma`` has shape (m, p).  Returns gbar (m, k) and vhat (m, k, k).
    """
    gbar = gamma @ M1
    second = np.einsum("mp,mq,pqkl->mkl", gamma, gamma, M2, optimize=True)
    vhat = (second - gbar[:, :, None] * gbar[:, None, :]) * (n / (n - 1.0))
    return gbar, 0.5 * (vhat + np.swapaxes(vhat, 1, 2))


class MomentModel:
    """Base class for moment models.

    Subclasses set ``name``, ``d_theta``, ``d_g`` and implement ``contributions``;
    ``evaluate_many`` may be overridden with a faster vectorized path.
    """

    name = "abstract"
    d_theta = 0
    d_g = 0

    def contributions(self, theta, data: Dataset) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, theta, data: Dataset) -> MomentEvaluation:
        contrib = self.contributions(np.asarray(theta, dtype=float), data)
        return _moments_from_contributions(contrib)

    def evaluate_many(self, thetas, data: Dataset):
        """Stacked ``(gbar (m, d_g), vhat (m, d_g, d_g))`` for parameter rows ``thetas`` (m, d_theta)."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        evals = [self.evaluate(t, data) for t in thetas]
        return np.array([e.gbar for e in evals]), np.array([e.vhat for e in evals])

    def simulate(self, spec: DgpSpec) -> Dataset:
        raise NotImplementedError

    def true_theta(self, spec: DgpSpec) -> np.ndarray:
        raise NotImplementedError


class NlsWeakModel(MomentModel):
    """``y = t1 x1 + t1 t2 x2 + u`` with standard normal ``(x1, x2, u)``.

    ``form="residual"`` uses contributions ``(y - t1 x1 - t1 t2 x2) * (x1, x2)``;
    ``form="text"`` uses ``(y x1 - t1, y x2 - t1 t2)``.  Both have population
    moments ``(t10 - t1, t10 t20 - t1 t2)``.
    """

    name = "nls_weak"
    d_theta = 2
    d_g = 2

    def __init__(self, form: str = "residual"):
        if form not in ("residual", "text"):
            raise DomainError(f"unknown NLS moment form {form!r}")
        self.form = form

    def simulate(self, spec: DgpSpec) -> Dataset:
        if len(spec.theta2_true) != 1:
            raise DomainError("nls_weak takes a scalar theta2")
        t1, t2 = self.true_theta(spec)
        rng = _rng(spec)
        x1, x2, u = rng.standard_normal((3, spec.n))
        return Dataset({"y": t1 * x1 + t1 * t2 * x2 + u, "x1": x1, "x2": x2})

    def true_theta(self, spec: DgpSpec) -> np.ndarray:
        return np.array([spec.c / np.sqrt(spec.n), spec.theta2_true[0]])

    def contributions(self, theta, data):
        t1, t2 = theta
        y, x1, x2 = data["y"], data["x1"], data["x2"]
        if self.form == "residual":
            e = y - t1 * x1 - t1 * t2 * x2
            return np.column_stack([e * x1, e * x2])
        return np.column_stack([y * x1 - t1, y * x2 - t1 * t2])

    def _stats(self, data):
        def build():
            W = np.column_stack([data["y"], data["x1"], data["x2"]])
            Z = W[:, 1:]
            n = W.shape[0]
            M1 = W.T @ Z / n
            M2 = np.einsum("ip,iq,ik,il->pqkl", W, W, Z, Z, optimize=True) / n
            return M1, M2

        return data.cached(("nls", "stats"), build)

    def evaluate_many(self, thetas, data):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        t1, t2 = thetas[:, 0], thetas[:, 1]
        n = data.n
        if self.form == "residual":
            M1, M2 = self._stats(data)
            gamma = np.column_stack([np.ones_like(t1), -t1, -t1 * t2])
            return _quadratic_residual_moments(M1, M2, gamma, n)
        # text form: contributions (y x1, y x2) shifted by a theta-dependent constant
        def base():
            return _moments_from_contributions(np.column_stack([data["y"] * data["x1"], data["y"] * data["x2"]]))

        ev = data.cached(("nls", "text"), base)
        gbar = ev.gbar[None, :] - np.column_stack([t1, t1 * t2])
        vhat = np.broadcast_to(ev.vhat, (thetas.shape[0], 2, 2)).copy()
        return gbar, vhat


def nls_population_moments(theta, theta0) -> np.ndarray:
    """Population moments ``(t10 - t1, t10 t20 - t1 t2)`` of the NLS model."""
    t1, t2 = theta
    t10, t20 = theta0
    return np.array([t10 - t1, t10 * t20 - t1 * t2])


def nls_population_jacobian(theta1_0: float, theta2: float) -> np.ndarray:
    """Matrix ``F`` with ``g(theta) = F @ (theta - theta0)`` for the NLS population moments.

    ``F = -[[1, 0], [t2, t10]]`` is lower triangular with eigenvalues ``-1`` and
    ``-t10`` (1 and ``t10`` up to the overall sign), so identification of ``t2``
    degrades as ``t10 -> 0``.
    """
    return -np.array([[1.0, 0.0], [theta2, theta1_0]])


def nls_population_derivative(theta1: float, theta2: float) -> np.ndarray:
    """Derivative of the population NLS moments at ``(theta1, theta2)``."""
    return np.array([[-1.0, 0.0], [-theta2, -theta1]])


class PolynomialModel(MomentModel):
    """Scalar model ``gbar(t) = mean(u) + (t - t0)**power`` with standard normal ``u``.

    With ``power=3`` the parameter is globally identified but the derivative
    vanishes at ``t0``.
    """

    d_theta = 1
    d_g = 1

    def __init__(self, power: int = 3):
        if power < 1:
            raise DomainError("power must be at least 1")
        self.power = int(power)
        self.name = "cubic" if power == 3 else f"poly{power}"

    def simulate(self, spec: DgpSpec) -> Dataset:
        rng = _rng(spec)
        return Dataset({"u": rng.standard_normal(spec.n), "theta0": np.full(spec.n, spec.theta2_true[0])})

    def true_theta(self, spec):
        return np.array([spec.theta2_true[0]])

    def contributions(self, theta, data):
        t0 = data["theta0"][0]
        return (data["u"] + (theta[0] - t0) ** self.power)[:, None]

    def evaluate_many(self, thetas, data):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        base = data.cached(("poly", "base"), lambda: _moments_from_contributions(data["u"][:, None]))
        t0 = data["theta0"][0]
        gbar = base.gbar[None, :] + (thetas - t0) ** self.power
        vhat = np.broadcast_to(base.vhat, (thetas.shape[0], 1, 1)).copy()
        return gbar, vhat


class LinearIVModel(MomentModel):
    """Linear IV: ``y = X theta + u``, ``X = Z Pi + v``, moments ``z (y - x' theta)``.

    Options (via ``DgpSpec.options``): ``d_theta`` (default 1), ``n_instruments``
    (default ``d_theta``), ``first_stage`` strength multiplying an identity-like
    ``Pi`` (default 1.0), ``endogeneity`` correlation between ``u`` and ``v``
    (default 0.5) and ``theta`` true coefficients (default ones).
    """

    name = "linear_iv"

    def __init__(self, d_theta: int = 1, n_instruments: int | None = None):
        self.d_theta = int(d_theta)
        self.d_g = int(n_instruments or d_theta)
        if self.d_g < self.d_theta:
            raise DomainError("need at least as many instruments as regressors")

    @classmethod
    def for_spec(cls, spec: DgpSpec) -> "LinearIVModel":
        return cls(spec.options.get("d_theta", 1), spec.options.get("n_instruments"))

    def true_theta(self, spec):
        return np.asarray(spec.options.get("theta", np.ones(self.d_theta)), dtype=float)

    def simulate(self, spec: DgpSpec) -> Dataset:
        rng = _rng(spec)
        n, k, p = spec.n, self.d_g, self.d_theta
        strength = float(spec.options.get("first_stage", 1.0))
        rho = float(spec.options.get("endogeneity", 0.5))
        Pi = np.zeros((k, p))
        Pi[np.arange(p), np.arange(p)] = strength
        if k > p:
            Pi[p:, :] = 0.5 * strength
        Z = rng.standard_normal((n, k))
        u = rng.standard_normal(n)
        V = rho * u[:, None] + np.sqrt(1 - rho**2) * rng.standard_normal((n, p))
        X = Z @ Pi + V
        y = X @ self.true_theta(spec) + u
        cols = {"y": y}
        cols.update({f"x{j + 1}": X[:, j] for j in range(p)})
        cols.update({f"z{j + 1}": Z[:, j] for j in range(k)})
        return Dataset(cols)

    def arrays(self, data):
        X = np.column_stack([data[f"x{j + 1}"] for j in range(self.d_theta)])
        Z = np.column_stack([data[f"z{j + 1}"] for j in range(self.d_g)])
        return data["y"], X, Z

    def contributions(self, theta, data):
        y, X, Z = self.arrays(data)
        return Z * (y - X @ theta)[:, None]

    def slope(self, data) -> np.ndarray:
        """Exact derivative ``-Z'X/n`` of the sample moments."""
        _, X, Z = self.arrays(data)
        return -Z.T @ X / data.n

    def _stats(self, data):
        def build():
            y, X, Z = self.arrays(data)
            W = np.column_stack([y, X])
            n = W.shape[0]
            return W.T @ Z / n, np.einsum("ip,iq,ik,il->pqkl", W, W, Z, Z, optimize=True) / n

        return data.cached(("liv", self.d_theta, self.d_g), build)

    def evaluate_many(self, thetas, data):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        M1, M2 = self._stats(data)
        gamma = np.column_stack([np.ones(thetas.shape[0]), -thetas])
        return _quadratic_residual_moments(M1, M2, gamma, data.n)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

MODEL_REGISTRY: dict[str, Callable[..., MomentModel]] = {
    "nls_weak": NlsWeakModel,
    "cubic": lambda **kw: PolynomialModel(power=kw.get("power", 3)),
    "linear_iv": lambda **kw: LinearIVModel(kw.get("d_theta", 1), kw.get("n_instruments")),
}


def get_model(name: str, **options) -> MomentModel:
    """Instantiate a registered model by name."""
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        raise DomainError(f"unknown model {name!r}; known: {sorted(MODEL_REGISTRY)}") from None
    return factory(**options)


def simulate(spec: DgpSpec, **model_options) -> tuple[MomentModel, Dataset]:
    """Build the model named in ``spec`` and draw a dataset from it."""
    options = dict(spec.options)
    options.update(model_options)
    model_kwargs = {k: options[k] for k in ("form", "power", "d_theta", "n_instruments") if k in options}
    model = get_model(spec.model_name, **model_kwargs)
    return model, model.simulate(spec)


def nls_simulate(spec: DgpSpec) -> Dataset:
    return NlsWeakModel().simulate(spec)


def nls_moments(theta, data: Dataset, form: str = "residual") -> MomentEvaluation:
    return NlsWeakModel(form).evaluate(theta, data)


def cubic_simulate(spec: DgpSpec) -> Dataset:
    return PolynomialModel(3).simulate(spec)


def cubic_moments(theta, data: Dataset) -> MomentEvaluation:
    return PolynomialModel(3).evaluate(np.atleast_1d(theta), data)


def linear_iv_simulate(spec: DgpSpec) -> Dataset:
    return LinearIVModel.for_spec(spec).simulate(spec)


def linear_iv_moments(theta, data: Dataset, d_theta: int = 1, n_instruments: int | None = None) -> MomentEvaluation:
    return LinearIVModel(d_theta, n_instruments).evaluate(np.atleast_1d(theta), data)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def quadratic_forms(gbar, vhat=None, weight=None) -> np.ndarray:
    """``g' W g`` for stacked moments; ``W = vhat^{-1}`` (continuous updating) unless ``weight`` is given."""
    gbar = np.atleast_2d(gbar)
    if weight is not None:
        return np.einsum("mi,ij,mj->m", gbar, np.asarray(weight), gbar)
    vhat = np.asarray(vhat)
    if vhat.ndim == 2:
        vhat = vhat[None]
    sol = np.linalg.solve(vhat, gbar[..., None])[..., 0]
    return np.einsum("mi,mi->m", gbar, sol)


def objective_many(model: MomentModel, data: Dataset, thetas, weight=None):
    """Objective ``Q(theta) = gbar' W gbar`` plus the underlying moments for rows of ``thetas``."""
    gbar, vhat = model.evaluate_many(thetas, data)
    return quadratic_forms(gbar, vhat, weight), gbar, vhat


def objective(model: MomentModel, data: Dataset, theta, weight=None) -> float:
    return float(objective_many(model, data, np.atleast_2d(theta), weight)[0][0])
