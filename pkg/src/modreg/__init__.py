"""Modular regression: variance-reduced linear models via conditional
independence, with penalized, fused, and simulated counterparts."""

from .data import (
    Dataset,
    FoldAssignment,
    FusionDataset,
    StandardizationSpec,
    inverse_standardize,
    load_csv,
    load_fusion_csv,
    split_folds,
    standardize,
)
from .errors import (
    ConvergenceError,
    DataError,
    ModregError,
    NumericalError,
    SeparationError,
    SingularMatrixError,
)
from .fusion import (
    FusionTermRows,
    fusion_fit,
    proxy_cross_term_miss,
    proxy_cross_term_part,
)
from .highdim import (
    ProjectionOperator,
    StructurePartition,
    cv_projection_etas,
    lasso,
    learn_structure,
    modular_lasso,
    projection_shortcut,
    proxy_cross_term_struct,
    transformed_response,
)
from .learners import (
    ConstantMeanLearner,
    FixedFunctionLearner,
    LambdaPath,
    Learner,
    LassoCVLearner,
    LinearLearner,
    PenaltyConfig,
    RidgeCVLearner,
    RidgeLearner,
    cv_lambda_path,
    default_lambda_grid,
    fit_ols,
    fit_ridge,
    get_learner,
    solve_l1_quadratic,
)
from .modular import (
    FAMILIES,
    GAUSSIAN,
    LOGISTIC,
    POISSON,
    CrossFitPredictions,
    GlmFamily,
    ModularFit,
    ProxyCrossTerm,
    crossfit_means,
    influence_covariance,
    modular_glm,
    modular_ols,
    proxy_cross_term_identity,
    proxy_cross_term_lm,
)
from .simbench import (
    NumericThetaStar,
    ReplicateRecord,
    SimConfig,
    SimResult,
    estimate,
    generate,
    numeric_theta_star,
    oracle_means,
    run_study,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
