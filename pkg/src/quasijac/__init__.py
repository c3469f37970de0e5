"""Quasi-Jacobian diagnostics and identification-robust subvector inference for moment models."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConsistencyError,
    ConvergenceError,
    DegenerateDesignError,
    DegenerateSampleError,
    DomainError,
    FlooringWarning,
    QuasiJacError,
    SingularVarianceError,
)
from .ics import IcsResult, select_category, singular_values_sorted  # noqa: E402
from .inference import (  # noqa: E402
    ArTestResult,
    ConfidenceSet,
    ac12_test,
    ar_statistic,
    ar_test,
    confidence_set,
    fd_jacobian,
    point_estimate,
    projection_test,
    wald_test,
)
from .levelset import (  # noqa: E402
    LevelSetSample,
    PmcConfig,
    compute_bandwidth,
    compute_cutoff,
    pmc_sample,
    pmc_schedule_next,
    screen_grid,
)
from .models import DgpSpec, MomentEvaluation, ParameterSpace, get_model, simulate  # noqa: E402
from .numerics import chi2_cdf, chi2_quantile, sobol_points, spd_inv_sqrt, weighted_least_squares  # noqa: E402
from .qjac import QuasiJacobian, fit_ls, fit_supnorm, normalized_matrix, sandwich_variance  # noqa: E402
