"""In-context prediction for mixtures of linear regressions.

Samplers for the mixture model, the posterior-mean (Bayes-optimal) predictor
and its baselines, batch EM, a numpy transformer with hand-written
gradients, an operator-level circuit that reproduces the posterior mean, and
a Monte-Carlo evaluation harness.
"""
__version__ = "0.1.0"

from .mixtures import (MixtureSpec, Prompt, PromptBatch, PromptSampler, sample_components,
                       sample_prompt, sample_prompts, sample_spec, shift_covariate_scale,
                       shift_weight_add, shift_weight_scale)
from .predictors import (ArgminRegressor, OLSRegressor, PosteriorMeanRegressor, argmin_predict,
                         make_predictor, ols_predict, posterior_mean_predict, posterior_probs,
                         residual_matrix)
from .em import BatchEM, EMConfig, em_fit, oracle_pred_error
from .construction import build_posterior_circuit, run_circuit
from .harness import MetricCurve, eval_mse_curve, eval_sq_distance, shift_sweep

__all__ = [
    "MixtureSpec", "Prompt", "PromptBatch", "PromptSampler", "sample_components", "sample_prompt",
    "sample_prompts", "sample_spec", "shift_covariate_scale", "shift_weight_add", "shift_weight_scale",
    "ArgminRegressor", "OLSRegressor", "PosteriorMeanRegressor", "argmin_predict", "make_predictor",
    "ols_predict", "posterior_mean_predict", "posterior_probs", "residual_matrix",
    "BatchEM", "EMConfig", "em_fit", "oracle_pred_error",
    "build_posterior_circuit", "run_circuit",
    "MetricCurve", "eval_mse_curve", "eval_sq_distance", "shift_sweep",
]
