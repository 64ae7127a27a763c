"""Spectral Galerkin / exponential-integrator simulation of the 1-D stochastic wave equation."""
from .errors import ConfigError, IndefiniteCovariance, NumericalInstability
from .harness import (
    ErrorReport,
    ExperimentConfig,
    RateFit,
    cost_ladder,
    cost_study,
    fit_rate,
    run_experiment,
    run_sample,
    spatial_sweep,
    temporal_sweep,
)
from .integrators import Propagator, SchemeKind, make_propagator, simulate_path, step
from .noise import (
    IncrementCovariance,
    NoiseBlock,
    SeedSpec,
    aggregate,
    cholesky3,
    increment_covariance,
    sample_block,
)
from .oracle import QuadratureSpec, em_reference, exact_linear_state, quadrature_covariance
from .spectral import (
    Basis,
    Drift,
    ModalState,
    build_basis,
    dst_forward,
    dst_inverse,
    eval_nonlinearity,
    get_drift,
    get_problem,
    l2_error,
    project_initial,
)

__version__ = "0.1.0"
