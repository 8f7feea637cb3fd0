"""Bias-corrected cross-validation for correlated data."""

from .covmodel import (
    ClusterDesign,
    ClusteredRandomIntercept,
    CompoundSymmetry,
    CovarianceSpec,
    Diagonal,
    ExponentialKernelNugget,
    HierarchicalRandomSlope,
    NumericalError,
    PredictionScenario,
    build_covariance,
    conditional_covariance,
    cross_covariance,
    cross_covariance_matrix,
    iid_design,
)
from .estimators import (
    CvEstimate,
    McEstimate,
    altman_estimator,
    cv_score,
    cvc_correction,
    cvc_score,
    expected_optimism,
    gcv,
    mc_wcv_oracle,
    select_model,
    wcv_gls_compound_symmetry,
)
from .predictors import (
    CvHatMatrix,
    Dataset,
    FoldAssignment,
    PredictorSpec,
    cv_hat_matrix,
    full_hat_matrix,
    h_te_rows,
    make_folds,
    predictor_row,
)
from .simharness import (
    ExperimentReport,
    SimDesign,
    approximate_generalization_error,
    generate_hierarchical,
    repeated_holdout_evaluation,
    run_density_experiment,
    run_selection_experiment,
)
from .varest import FitResult, fit_variance_components, gaussian_loglik
from .dataio import TableSchema, load_csv

__version__ = "0.1.0"

__all__ = [
    "ClusterDesign",
    "ClusteredRandomIntercept",
    "CompoundSymmetry",
    "CovarianceSpec",
    "CvEstimate",
    "CvHatMatrix",
    "Dataset",
    "Diagonal",
    "ExperimentReport",
    "ExponentialKernelNugget",
    "FitResult",
    "FoldAssignment",
    "HierarchicalRandomSlope",
    "McEstimate",
    "NumericalError",
    "PredictionScenario",
    "PredictorSpec",
    "SimDesign",
    "TableSchema",
    "altman_estimator",
    "approximate_generalization_error",
    "build_covariance",
    "conditional_covariance",
    "cross_covariance",
    "cross_covariance_matrix",
    "cv_hat_matrix",
    "cv_score",
    "cvc_correction",
    "cvc_score",
    "expected_optimism",
    "fit_variance_components",
    "full_hat_matrix",
    "gaussian_loglik",
    "gcv",
    "generate_hierarchical",
    "h_te_rows",
    "iid_design",
    "load_csv",
    "make_folds",
    "mc_wcv_oracle",
    "predictor_row",
    "repeated_holdout_evaluation",
    "run_density_experiment",
    "run_selection_experiment",
    "select_model",
    "wcv_gls_compound_symmetry",
]
