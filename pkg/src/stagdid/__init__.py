"""Estimation of group-time treatment effects in staggered adoption panels.

Provides a Gibbs sampler for a Gaussian potential-outcomes panel model with
unit-level random intercepts (three prior regimes: default, trained on a
held-out subsample, Student-t shrinkage), marginal-likelihood model comparison
between the full and reduced pre-trend variants, an iterated feasible GLS
estimator with delta-method inference, and a seeded Monte Carlo harness.
"""

from .design import (
    DesignSet,
    ParamLayout,
    build_design,
    build_layout,
    lower_triangular_ones,
    mean_paths,
    pre_post_matrices,
)
from .errors import (
    AbsorbingViolationError,
    DimensionError,
    DomainError,
    EstimationError,
    IdentificationError,
    InputError,
    NonConvergenceError,
    SchemaError,
    SingularSystemError,
    SplitError,
    StagdidError,
    UnbalancedPanelError,
)
from .model import (
    AttRow,
    AttTable,
    ModelParams,
    att_from_delta,
    lambda_inverse,
    marginal_loglik,
    predid_from_delta,
)
from .panel import (
    PanelDataset,
    ValidationReport,
    load_panel,
    split_training,
    validate,
    write_panel,
)
from .priors import (
    InvGammaBlock,
    NormalBlock,
    PriorSpec,
    default_prior,
    student_t_prior,
    training_prior,
)
from .gibbs import (
    ChainDriver,
    GibbsConfig,
    PosteriorDraws,
    run_chain,
    sample_prior_params,
    summarize,
)
from .ifgls import (
    IfglsConfig,
    IfglsEstimate,
    delta_method_att,
    ifgls_fit,
)
from .mlik import (
    MarglikConfig,
    MarglikResult,
    log_marginal_likelihood,
    posterior_model_probs,
)
from .sim import (
    DgpConfig,
    EstimatorSpec,
    SimulationReport,
    application_dgp,
    application_synthetic,
    generate_dataset,
    run_replications,
    small_n_dgp,
    benchmark_dgp,
)
from .cli import main as cli_main

__version__ = "0.1.0"

__all__ = [
    "AbsorbingViolationError",
    "AttRow",
    "AttTable",
    "ChainDriver",
    "DesignSet",
    "DgpConfig",
    "DimensionError",
    "DomainError",
    "EstimationError",
    "EstimatorSpec",
    "GibbsConfig",
    "IdentificationError",
    "IfglsConfig",
    "IfglsEstimate",
    "InputError",
    "InvGammaBlock",
    "MarglikConfig",
    "MarglikResult",
    "ModelParams",
    "NonConvergenceError",
    "NormalBlock",
    "PanelDataset",
    "ParamLayout",
    "PosteriorDraws",
    "PriorSpec",
    "SchemaError",
    "SimulationReport",
    "SingularSystemError",
    "SplitError",
    "StagdidError",
    "UnbalancedPanelError",
    "ValidationReport",
    "application_dgp",
    "application_synthetic",
    "att_from_delta",
    "build_design",
    "build_layout",
    "cli_main",
    "default_prior",
    "delta_method_att",
    "generate_dataset",
    "ifgls_fit",
    "lambda_inverse",
    "load_panel",
    "log_marginal_likelihood",
    "lower_triangular_ones",
    "marginal_loglik",
    "mean_paths",
    "posterior_model_probs",
    "pre_post_matrices",
    "predid_from_delta",
    "run_chain",
    "run_replications",
    "sample_prior_params",
    "small_n_dgp",
    "split_training",
    "student_t_prior",
    "summarize",
    "benchmark_dgp",
    "training_prior",
    "validate",
    "write_panel",
]
