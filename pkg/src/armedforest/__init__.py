"""Random forests, two-armed forests and diagnostics for hidden pairwise-independent predictors."""

from .cart import RegressionTree, TreeParams, best_split, fit_tree, predict_tree, tree_structure_report
from .dataset import Dataset
from .diagnostics import (ImportanceReport, MetricsReport, UsageReport, discrepancy_screen, evaluate,
                          permutation_importance, usage_statistics)
from .errors import (ArmedForestError, ConfigError, DegenerateBaselineError, NumericError,
                     RejectedParametersError, SamplerStallError)
from .forest import (ArmedForest, DeltaArm, Forest, ForestParams, fit_armed_forest, fit_forest, load_json,
                     predict_armed, predict_forest, resolve_arm, save_json)
from .oracle import OracleSpec, marginal_predict, optimal_predict
from .sim import (Model8Params, PairwiseDensitySpec, conditional_cdf, conditional_cdf_inverse, sample_bernstein,
                  sample_pairwise_density, simulate_model3, simulate_model8)

__version__ = "0.1.0"

__all__ = [
    "ArmedForest", "ArmedForestError", "ConfigError", "Dataset", "DegenerateBaselineError", "DeltaArm",
    "Forest", "ForestParams", "ImportanceReport", "MetricsReport", "Model8Params", "NumericError",
    "OracleSpec", "PairwiseDensitySpec", "RegressionTree", "RejectedParametersError", "SamplerStallError",
    "TreeParams", "UsageReport", "best_split", "conditional_cdf", "conditional_cdf_inverse",
    "discrepancy_screen", "evaluate", "fit_armed_forest", "fit_forest", "fit_tree", "load_json",
    "marginal_predict", "optimal_predict", "permutation_importance", "predict_armed", "predict_forest",
    "predict_tree", "resolve_arm", "sample_bernstein", "sample_pairwise_density", "save_json",
    "simulate_model3", "simulate_model8", "tree_structure_report", "usage_statistics",
]
