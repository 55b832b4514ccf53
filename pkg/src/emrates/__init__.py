"""Strong-rate experiments for Euler schemes with irregular drift.

The package simulates one-step frozen-coefficient Euler paths driven by
reproducible Brownian streams, estimates how pathwise errors, occupation
quadrature functionals, Girsanov weights, and resolvent-identity residuals
scale with the step count, and packages the standard checks behind a
config-driven CLI.
"""

from ._version import __version__
from .brownian import (
    BrownianPath,
    RngStream,
    TimeGrid,
    block_sum,
    coarsen,
    derive_stream,
    sample_increment_batch,
    sample_path,
)
from .coefficients import (
    DiffusionSpec,
    DriftSpec,
    ProblemSpec,
    TestFunctionSpec,
    builtin_diffusion,
    builtin_drift,
    builtin_scalar_field,
    builtin_test_function,
    check_ellipticity,
    check_sublinear_growth,
    estimate_holder_seminorm,
)
from .errors import (
    ConfigError,
    DiscretizationError,
    EllipticityError,
    EmratesError,
    EvaluationError,
    SimulationError,
)
from .estimators import (
    MomentScaling,
    MonteCarloResult,
    RateFit,
    StrongErrorCurve,
    crude_quadrature_bound,
    fit_rate,
    girsanov_moments,
    moment_scaling,
    node_moment_sup,
    quadrature_decay,
    strong_error,
    strong_error_curve,
    tail_probability,
)
from .experiments import (
    ExperimentConfig,
    ExperimentReport,
    load_config,
    run,
    run_path,
    validate,
)
from .scheme import (
    EMPath,
    GirsanovWeight,
    em_path,
    em_terminal_pair,
    girsanov_weight,
    quadrature_functional,
)
from .zvonkin1d import (
    ResolventSolution,
    ito_tanaka_residual,
    norm_decay_sweep,
    residual_decay_curve,
    solve_resolvent,
)

__all__ = [
    "__version__",
    "BrownianPath",
    "RngStream",
    "TimeGrid",
    "block_sum",
    "coarsen",
    "derive_stream",
    "sample_increment_batch",
    "sample_path",
    "DiffusionSpec",
    "DriftSpec",
    "ProblemSpec",
    "TestFunctionSpec",
    "builtin_diffusion",
    "builtin_drift",
    "builtin_scalar_field",
    "builtin_test_function",
    "check_ellipticity",
    "check_sublinear_growth",
    "estimate_holder_seminorm",
    "ConfigError",
    "DiscretizationError",
    "EllipticityError",
    "EmratesError",
    "EvaluationError",
    "SimulationError",
    "MomentScaling",
    "MonteCarloResult",
    "RateFit",
    "StrongErrorCurve",
    "crude_quadrature_bound",
    "fit_rate",
    "girsanov_moments",
    "moment_scaling",
    "node_moment_sup",
    "quadrature_decay",
    "strong_error",
    "strong_error_curve",
    "tail_probability",
    "ExperimentConfig",
    "ExperimentReport",
    "load_config",
    "run",
    "run_path",
    "validate",
    "EMPath",
    "GirsanovWeight",
    "em_path",
    "em_terminal_pair",
    "girsanov_weight",
    "quadrature_functional",
    "ResolventSolution",
    "ito_tanaka_residual",
    "norm_decay_sweep",
    "residual_decay_curve",
    "solve_resolvent",
]
