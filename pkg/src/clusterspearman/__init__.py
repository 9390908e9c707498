"""
Total, between-cluster and within-cluster Spearman rank correlations for
two-level clustered data.

The total correlation is a weighted mid-CDF (ridit) correlation.  The
within-cluster correlation is the correlation of probability-scale
residuals from cumulative probability models with cluster indicators, and
the between-cluster correlation is the rank correlation of the fitted
cluster coefficients (``gamma_b_median``) or the one implied by the total,
within and rank ICC values (``gamma_b_approx``).
"""
__version__ = "0.1.0"

from .analysis import Analysis, analyze
from .cpm import CpmFit, fit_cpm, fit_cpm_dataset, psr_from_cpm, psr_nonparametric
from .dataset import (ClusteredDataset, ValueKind, WeightScheme, WeightVector, compute_weights,
                      load_csv)
from .estimators import (ESTIMATORS, CorrelationEstimate, Method, gamma_b_approx, gamma_b_median,
                         gamma_t, gamma_w, naive_between, naive_within, point_estimates)
from .exceptions import (ClusterSpearmanError, ConvergenceError, DataError, DegenerateInputError,
                         InferenceUnsupportedError, InstabilityError, NumericalError,
                         SeparationError)
from .inference import cluster_bootstrap, sandwich_gamma_b, sandwich_gamma_w, var_gamma_t
from .rankcore import rank_icc, total_spearman, weighted_mid_cdf
from .simstudy import ScenarioConfig, SimulationReport, generate, run_study, true_values

__all__ = [
    "__version__",
    "Analysis", "analyze",
    "CpmFit", "fit_cpm", "fit_cpm_dataset", "psr_from_cpm", "psr_nonparametric",
    "ClusteredDataset", "ValueKind", "WeightScheme", "WeightVector", "compute_weights", "load_csv",
    "ESTIMATORS", "CorrelationEstimate", "Method", "gamma_b_approx", "gamma_b_median", "gamma_t",
    "gamma_w", "naive_between", "naive_within", "point_estimates",
    "ClusterSpearmanError", "ConvergenceError", "DataError", "DegenerateInputError",
    "InferenceUnsupportedError", "InstabilityError", "NumericalError", "SeparationError",
    "cluster_bootstrap", "sandwich_gamma_b", "sandwich_gamma_w", "var_gamma_t",
    "rank_icc", "total_spearman", "weighted_mid_cdf",
    "ScenarioConfig", "SimulationReport", "generate", "run_study", "true_values",
]
