"""Data-driven risk estimation for the iterates of first-order regression solvers."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    IncompleteTrajectoryError,
    InvalidParameterError,
    NotPositiveDefiniteError,
    TruthRequiredError,
)
from .estimator import IterateRiskRegressor
from .inference import (
    InferenceEntry,
    InferenceReport,
    RiskReport,
    averaged_risk_estimate,
    confidence_interval,
    cross_risk_estimate,
    cross_risk_matrix,
    debias,
    early_stop,
    inference_report,
    normal_quantile,
    risk_estimate,
    risk_path,
    risk_report,
    zscore,
)
from .memory import (
    MemoryMatrix,
    WeightMatrix,
    build_memory,
    check_weights,
    memory_exact,
    memory_gd_closed_form,
    memory_hutchinson,
    weights,
)
from .model import (
    LinearModelInstance,
    SimulationConfig,
    Truth,
    ar1_covariance,
    covariance_factor,
    generate_instance,
    minnorm_limit,
    true_cross_risk,
    true_risk,
)
from .solvers import (
    SolverConfig,
    Trajectory,
    agd_step,
    fista_step,
    gd_step,
    ista_step,
    lipschitz_constant,
    lqa_mcp_step,
    momentum_sequence,
    run_trajectory,
    soft_threshold,
)
from .harness import ExperimentConfig, RunOutputs, emit_csv, lasso_limit, run_experiment
