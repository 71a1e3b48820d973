"""Eigen-Fourier physics-informed Gaussian process inference for ODEs.

Estimates ODE parameters and reconstructs trajectories from noisy, sparse
observations without numerical integration in the fitting loop, plus the
full-state baseline objective and a benchmark harness.
"""

from .bench_harness import (
    DISCRETIZATIONS,
    ExperimentConfig,
    MetricsRow,
    ObservationSet,
    PROTOCOLS,
    SystemProtocol,
    TRUNCATION_DEFAULTS,
    evaluate_rmse,
    generate_dataset,
    ground_truth,
    run_benchmark,
    run_inference,
)
from .efigp_core import (
    MagiPrecomp,
    PosteriorPrecomp,
    PosteriorState,
    gradient,
    magi_neg_log_posterior,
    magi_precompute,
    neg_log_posterior,
    objective_breakdown,
    precompute,
)
from .kernels import (
    GpConditionals,
    KernelHyperparams,
    fit_hyperparameters,
    gp_smooth_posterior,
    kernel_block,
)
from .map_optimizer import (
    InferenceProblem,
    InferenceResult,
    OptimizerConfig,
    initialize_state,
    optimize_map,
    solve_problem,
    stabilize_truncation,
)
from .ode_models import (
    OdeSystem,
    TimeGrid,
    Trajectory,
    eval_rhs,
    fn_system,
    get_system,
    hes1_system,
    integrate_rk4,
    lv_system,
)
from .spectral_ops import (
    EigenBasis,
    FourierOperator,
    build_fourier_operator,
    project_to_coefficients,
    push_covariance,
    synthesize_trajectory,
    truncated_eigen,
)

__version__ = "0.1.0"
