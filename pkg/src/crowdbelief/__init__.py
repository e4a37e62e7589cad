"""Aggregating expert probability forecasts that evolve over time.

A dynamic hierarchical model treats each question's crowd belief as a hidden
AR(1) process on the log-odds scale, observed through group-biased expert
reports. ``gibbs`` samples it, ``calibrate`` recovers the scale from resolved
questions, and ``baselines``/``evaluation`` compare against simple smoothers.
"""

from ._kernels import BACKEND
from .calibrate import (AggregatePath, BsacConfig, CalibrationResult, Rule, SacFit, SeparationError,
                        bsac_sample, estimate_beta, fit_sac, sac_out_of_sample, sac_out_of_sample_many)
from .dlm import DlmParams, backward_sample, forward_filter, predict_forward
from .domain import (Dataset, Forecast, QuestionPanel, balance, censor, inverse_logit, load_dataset,
                     logit)
from .gibbs import Chain, GibbsConfig, sample_posterior

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "AggregatePath", "BsacConfig", "CalibrationResult", "Chain", "Dataset", "DlmParams",
    "Forecast", "GibbsConfig", "QuestionPanel", "Rule", "SacFit", "SeparationError",
    "backward_sample", "balance", "bsac_sample", "censor", "estimate_beta", "fit_sac",
    "forward_filter", "inverse_logit", "load_dataset", "logit", "predict_forward",
    "sac_out_of_sample", "sac_out_of_sample_many", "sample_posterior",
]
