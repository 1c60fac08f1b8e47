"""Multi-penalty ridge regression computed through per-block Gram matrices."""

from .bench import SimSpec, benchmark, simulate, topk_overlap
from .cv import FoldPlan, UtilitySpec, cv_utility, double_cv, evaluate_metric, make_folds
from .glm import (
    BaselineHazard,
    FitState,
    IwlsControl,
    ResponseSpec,
    breslow,
    family_moments,
    fit_gamma,
    iwls_fit,
    loglik,
)
from .linalg import (
    BlockedDesign,
    GramSet,
    HatFactors,
    PenaltyConfig,
    RidgeContext,
    assemble_gamma,
    cv_hat_matrix,
    hat_matrix,
    hat_matrix_unpenalized,
    paired_param_transform,
    precompute_grams,
    predict_new,
    recover_coefficients,
    submatrix_gamma,
)
from .marglik import LaplaceMlState, laplace_log_ml, tune_ml
from .tuning import SvdCache, TunerConfig, TuneResult, init_uni_penalty, tune, tune_preferential
from .vb_probit import VbState, cpo, elbo, tune_elbo, vb_fit

__version__ = "0.1.0"
