"""Gradient-only escape from sharp minima, with a numerical flatness certifier.

The package bundles analytic test landscapes, the gradient-flow limit map,
two perturbed-gradient algorithms that drive iterates toward flatter minima
(a randomly smoothed variant for general losses and a sharpness-aware variant
for sample-sum losses), a brute-force verification suite for the estimator
identities behind them, and a batch experiment CLI.
"""

from .geometry import (
    RngStream,
    fd_gradient,
    fd_jacobian,
    normalized_trace,
    proj_out,
    sample_sphere,
    sample_sphere_batch,
)
from .objectives import (
    LandscapeSpec,
    Objective,
    SampleSumObjective,
    build_convex_quadratic,
    build_hyperbola,
    build_landscape,
    build_orthogonal_quadratic_model,
    build_scalar_factorization,
    canonical_minimum,
)
from .flow import (
    ACCURATE_FLOW,
    DEFAULT_FLOW,
    ORACLE_FLOW,
    REFERENCE_FLOW,
    FlatnessCertificate,
    FlowConfig,
    FlowConvergenceError,
    certify_flat,
    gradient_flow_limit,
    restricted_trace_gradient,
    trace_at_flow_limit,
)
from .optimizers import (
    DegenerateSampleError,
    DivergenceError,
    IterateRecord,
    RefinementError,
    Schedule,
    ScheduleConstants,
    Trajectory,
    refine,
    rs_schedule,
    rs_step,
    run,
    sa_schedule,
    sa_step,
    trajectory_csv,
)
from .oracle import (
    OracleReport,
    SampleRegion,
    check_descent_lemma,
    check_rs_decay,
    check_rs_estimator,
    check_sa_dfactor,
    check_sphere_moments,
    estimate_pl_constants,
)

__all__ = [
    "RngStream",
    "fd_gradient",
    "fd_jacobian",
    "normalized_trace",
    "proj_out",
    "sample_sphere",
    "sample_sphere_batch",
    "LandscapeSpec",
    "Objective",
    "SampleSumObjective",
    "build_convex_quadratic",
    "build_hyperbola",
    "build_landscape",
    "build_orthogonal_quadratic_model",
    "build_scalar_factorization",
    "canonical_minimum",
    "ACCURATE_FLOW",
    "DEFAULT_FLOW",
    "ORACLE_FLOW",
    "REFERENCE_FLOW",
    "FlatnessCertificate",
    "FlowConfig",
    "FlowConvergenceError",
    "certify_flat",
    "gradient_flow_limit",
    "restricted_trace_gradient",
    "trace_at_flow_limit",
    "DegenerateSampleError",
    "DivergenceError",
    "IterateRecord",
    "RefinementError",
    "Schedule",
    "ScheduleConstants",
    "Trajectory",
    "refine",
    "rs_schedule",
    "rs_step",
    "run",
    "sa_schedule",
    "sa_step",
    "trajectory_csv",
    "OracleReport",
    "SampleRegion",
    "check_descent_lemma",
    "check_rs_decay",
    "check_rs_estimator",
    "check_sa_dfactor",
    "check_sphere_moments",
    "estimate_pl_constants",
]

__version__ = "0.1.0"
