"""Deterministic ADVI: fixed-draw variational inference with linear-response
covariances and Monte-Carlo error estimates."""
from . import _kernels
from .errors import (
    CGNotConverged,
    ContractViolation,
    DegenerateDraws,
    DegenerateNormalization,
    InvalidConfiguration,
    NonFiniteObjective,
    NotAtOptimum,
    UnsupportedQuantity,
)
from .model import (
    BradleyTerryModel,
    FunctionModel,
    GlobalLocalModel,
    HierarchicalNormalModel,
    Model,
    ParameterTransform,
    QuadraticModel,
    bradley_terry_synthetic,
    build_model,
    instantiate_hierarchical,
    random_spd,
    transform_model,
)
from .optimize import OptimizerConfig, OptimizationTrace, SGConfig, dadvi_fit, dadvi_fit_fullrank, sg_fit
from .posterior import (
    CGConfig,
    HessianOperator,
    QoIReport,
    build_qoi_report,
    cg_solve,
    dadvi_preconditioner,
    lr_covariance,
    lr_covariance_by_tilting,
    lr_covariance_matrix,
    mc_error,
    verify_optimum,
)
from .saa import (
    DrawSet,
    ObjectiveBundle,
    quadratic_saa_optimum,
    sample_draws,
    saa_gradient,
    saa_hvp,
    saa_objective,
    saa_objective_fullrank,
)
from .variational import FullRankParams, MeanFieldParams, QuantityOfInterest, saa_moment_gradient

BACKEND = _kernels.BACKEND
__version__ = "0.1.0"
