"""Training-free flow-matching samplers and their kinetic-energy diagnostics."""

__version__ = "0.1.0"

from .core import (
    AffineSchedule,
    Dataset,
    GaussianParams,
    SourceKernel,
    T_MAX_DEFAULT,
    affine_coefficients,
    conditional_log_density,
    max_row_norm,
    regularized_rf_schedule,
    rf_schedule,
    sample_source,
)
from .diagnostics import (
    AsymmetryReport,
    NearestDistanceStats,
    asymmetry_norm,
    asymmetry_report,
    continuity_residual,
    jacobian_fd,
    memorization_proxy,
    skew_condition_sum,
)
from .ot import (
    AffineGrowthConstants,
    GaussianSourceTailConstants,
    GaussianTransport,
    affine_growth_constants,
    chisq_tail_bound,
    chisq_tail_monte_carlo,
    energy_identity_residual,
    exp_tail_bound,
    gaussian_mgf,
    gaussian_mgf_monte_carlo,
    gaussian_source_tail_constants,
    inverse_map,
    monge_map,
    ot_energy,
    w2_squared_gaussian,
)
from .tails import (
    InsufficientDataError,
    SurvivalCurve,
    TailFitError,
    TailFitResult,
    bound_domination_check,
    dkw_radius,
    fit_exponential_tail,
    fit_polynomial_tail,
    survival_function,
)
from .transport import (
    EnergyTable,
    IntegrationDivergedError,
    IntegratorConfig,
    Trajectory,
    batch_endpoints,
    batch_energies,
    energy_quadrature,
    integrate,
    kinetic_energy,
    read_energy_csv,
    trajectory_norm_bound_check,
)
from .velocity import (
    EmpiricalField,
    PopulationGaussianField,
    empirical_log_density,
    empirical_velocity,
    population_gaussian_velocity,
    population_score,
    rf_softmax_velocity,
    rf_softmax_weights,
    weights,
)

__all__ = [
    "__version__",
    "AffineGrowthConstants",
    "AffineSchedule",
    "AsymmetryReport",
    "Dataset",
    "EmpiricalField",
    "EnergyTable",
    "GaussianParams",
    "GaussianSourceTailConstants",
    "GaussianTransport",
    "InsufficientDataError",
    "IntegrationDivergedError",
    "IntegratorConfig",
    "NearestDistanceStats",
    "PopulationGaussianField",
    "SourceKernel",
    "SurvivalCurve",
    "T_MAX_DEFAULT",
    "TailFitError",
    "TailFitResult",
    "Trajectory",
    "affine_coefficients",
    "affine_growth_constants",
    "asymmetry_norm",
    "asymmetry_report",
    "batch_endpoints",
    "batch_energies",
    "bound_domination_check",
    "chisq_tail_bound",
    "chisq_tail_monte_carlo",
    "conditional_log_density",
    "continuity_residual",
    "dkw_radius",
    "empirical_log_density",
    "empirical_velocity",
    "energy_identity_residual",
    "energy_quadrature",
    "exp_tail_bound",
    "fit_exponential_tail",
    "fit_polynomial_tail",
    "gaussian_mgf",
    "gaussian_mgf_monte_carlo",
    "gaussian_source_tail_constants",
    "integrate",
    "inverse_map",
    "jacobian_fd",
    "kinetic_energy",
    "max_row_norm",
    "memorization_proxy",
    "monge_map",
    "ot_energy",
    "population_gaussian_velocity",
    "population_score",
    "read_energy_csv",
    "regularized_rf_schedule",
    "rf_schedule",
    "rf_softmax_velocity",
    "rf_softmax_weights",
    "sample_source",
    "skew_condition_sum",
    "survival_function",
    "trajectory_norm_bound_check",
    "w2_squared_gaussian",
    "weights",
]
