"""Multi-species N-mixture models with hurdle and autoregressive extensions."""

__version__ = "0.1.0"

from .correlations import (CorrelationReport, corr_ar, corr_from_sigma, corr_hurdle, corr_mnm,
                           correlation_report)
from .distributions import DomainError, RngStream
from .io import IngestError, emit_results, parse_config, parse_counts_csv, write_counts_csv
from .metrics import (MannKendall, StudyMetricRow, bic, ccc, cmd, coverage, mann_kendall,
                      marginal_loglik, model_bic, n_params, relative_bias)
from .model import Dataset, ModelSpec, Parameters
from .sampler import PosteriorDraws, PosteriorSummary, SamplerConfig, fit, rhat, summarize
from .simulation import GroundTruth, Scenario, run_study, simulate_dataset
from .validation import geweke_check

__all__ = [
    "CorrelationReport", "corr_ar", "corr_from_sigma", "corr_hurdle", "corr_mnm", "correlation_report",
    "DomainError", "RngStream", "IngestError", "emit_results", "parse_config", "parse_counts_csv",
    "write_counts_csv", "MannKendall", "StudyMetricRow", "bic", "ccc", "cmd", "coverage", "mann_kendall",
    "marginal_loglik", "model_bic", "n_params", "relative_bias", "Dataset", "ModelSpec", "Parameters",
    "PosteriorDraws", "PosteriorSummary", "SamplerConfig", "fit", "rhat", "summarize", "GroundTruth",
    "Scenario", "run_study", "simulate_dataset", "geweke_check",
]
