"""Optimal unbiased minimum-variance linear filtering for interacting
particle systems: covariance dynamics, gain-sensitivity kernels, gradient
optimization of the filter gain, closed-form references and Monte Carlo
validation."""

__version__ = "0.1.0"

from .covariance import (
    CovarianceField,
    GradientField,
    cost_gradient,
    covariance_drift,
    covariance_field,
    covariance_profile,
    covariance_sensitivity,
    error_covariance,
    fd_cost_slope,
    mean_sensitivity,
    mean_sensitivity_triangle,
    sensitivity_profile,
    trace_cost,
)
from .gain import (
    FilterCoefficients,
    OptimizationReport,
    RiccatiSolution,
    build_filter,
    optimize_gain,
    riccati_classical,
    riccati_normal_flow,
    stationarity_residual,
)
from .kernels import (
    FORM_REDERIVED,
    FORM_TRANSCRIBED,
    DerivativeKernels,
    GainSchedule,
    KernelBundle,
    compute_f,
    compute_phi,
    compute_psi,
    derivative_kernels,
    kernel_bundle,
)
from .numerics import (
    TimeGrid,
    TriangularKernel,
    cumulative_trapezoid,
    make_grid,
    trapezoid,
    trapezoid_integrate,
)
from .scenarios import (
    classical_scenario,
    load_scenario,
    normal_flow_scenario,
    resolve_scenario,
    scenario_hash,
)
from .simulation import (
    EmpiricalStats,
    PathEnsemble,
    SimulationError,
    empirical_statistics,
    simulate_ensemble,
)
from .system_model import (
    BarQuantities,
    InitialMeasure,
    Scenario,
    ScenarioError,
    build_scenario,
    dirac_measure,
    discrete_measure,
    gauss_hermite_measure,
    measure_averages,
    standard_measure,
)

__all__ = [name for name in dir() if not name.startswith("_")]
