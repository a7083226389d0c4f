"""Predictors for the query label of a prompt.

The posterior mean is the MSE-optimal rule when the components and the noise
level are known; argmin and least squares are the comparison baselines.
Each rule exists as a single-prompt function, a vectorised batch function,
and a scikit-learn style estimator.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_components, check_prompts, check_sigma
from .mixtures import MixtureSpec, Prompt, PromptBatch

OLS_RCOND = 1e-10


@dataclass
class PosteriorSummary:
    """Posterior over components for one prompt.

    ``noiseless`` is set when ``sigma == 0`` and ``probs`` is the uniform
    distribution over the components with the smallest in-prompt loss.
    """

    probs: np.ndarray
    w_hat: np.ndarray
    prediction: float
    noiseless: bool = False


# -- single prompt -------------------------------------------------------------

def residual_matrix(prompt: Prompt, components) -> np.ndarray:
    """Residuals ``<w_j, x_i> - y_i``; the query row carries no label term.

    Returns an array of shape ``(k + 1, m)``.
    """
    w = check_components(components, prompt.d)
    r = prompt.xs @ w.T
    r[:-1] -= prompt.ys[:, None]
    return r


def _log_weights(loss: np.ndarray, sigma: float) -> np.ndarray:
    return -loss / (2.0 * sigma * sigma)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _noiseless_rows(loss: np.ndarray) -> np.ndarray:
    hit = loss == loss.min(axis=-1, keepdims=True)
    return hit / hit.sum(axis=-1, keepdims=True)


def _probs_from_loss(loss: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0.0:
        return _noiseless_rows(loss)
    return _softmax_rows(_log_weights(loss, sigma))


def posterior_probs(prompt: Prompt, spec: MixtureSpec) -> np.ndarray:
    """Posterior probability of each component given the labelled part of ``prompt``."""
    r = residual_matrix(prompt, spec.components)[:-1]
    loss = np.sum(r * r, axis=0)
    return _probs_from_loss(loss, spec.sigma)


def posterior_mean_predict(prompt: Prompt, spec: MixtureSpec) -> PosteriorSummary:
    probs = posterior_probs(prompt, spec)
    w_hat = probs @ spec.components
    return PosteriorSummary(probs, w_hat, float(w_hat @ prompt.query), spec.sigma == 0.0)


def argmin_predict(prompt: Prompt, components) -> float:
    """Predict with the component of least in-prompt squared loss (ties: lowest index)."""
    w = check_components(components, prompt.d)
    r = residual_matrix(prompt, w)[:-1]
    j = int(np.argmin(np.sum(r * r, axis=0)))
    return float(w[j] @ prompt.query)


def ols_predict(prompt: Prompt, rcond: float = OLS_RCOND) -> float:
    """Minimum-norm least squares fit on the labelled pairs, evaluated at the query."""
    if prompt.k == 0:
        return 0.0
    w = np.linalg.pinv(prompt.xs[:-1], rcond=rcond) @ prompt.ys
    return float(w @ prompt.query)


# -- batches -------------------------------------------------------------------

def batch_losses(batch: PromptBatch, components: np.ndarray) -> np.ndarray:
    """Per prompt, per component sum of squared residuals; shape ``(n, m)``."""
    r = np.einsum("nkd,md->nkm", batch.xs[:, :-1, :], components) - batch.ys[:, :, None]
    return np.einsum("nkm,nkm->nm", r, r)


def batch_posterior_probs(batch: PromptBatch, components, sigma: float) -> np.ndarray:
    w = check_components(components, batch.d)
    return _probs_from_loss(batch_losses(batch, w), check_sigma(sigma))


def batch_posterior_mean(batch: PromptBatch, components, sigma: float) -> np.ndarray:
    w = check_components(components, batch.d)
    probs = batch_posterior_probs(batch, w, sigma)
    return np.einsum("nd,nd->n", probs @ w, batch.queries)


def batch_argmin(batch: PromptBatch, components) -> np.ndarray:
    w = check_components(components, batch.d)
    j = np.argmin(batch_losses(batch, w), axis=1)
    return np.einsum("nd,nd->n", w[j], batch.queries)


def batch_ols(batch: PromptBatch, rcond: float = OLS_RCOND) -> np.ndarray:
    if batch.k == 0:
        return np.zeros(batch.n)
    w = np.einsum("ndk,nk->nd", np.linalg.pinv(batch.xs[:, :-1, :], rcond=rcond), batch.ys)
    return np.einsum("nd,nd->n", w, batch.queries)


def log_evidence(batch: PromptBatch, components, sigma: float) -> np.ndarray:
    """Log-normaliser of the exponential weights, up to a constant per prompt."""
    w = check_components(components, batch.d)
    return logsumexp(_log_weights(batch_losses(batch, w), sigma), axis=1)


# -- registry ------------------------------------------------------------------

Predictor = Callable[[PromptBatch], np.ndarray]


def zero_predictor(batch: PromptBatch) -> np.ndarray:
    return np.zeros(batch.n)


def make_predictor(name: str, spec: MixtureSpec | None = None, weights=None) -> Predictor:
    """Look up a predictor by registry name.

    ``posterior_mean`` and ``argmin`` use the true components of ``spec``;
    their ``:estimated`` variants use ``weights`` instead (with the noise
    level of ``spec``). ``ols`` and ``zero`` need neither.
    """
    base, _, variant = name.partition(":")
    if variant not in ("", "oracle", "estimated"):
        raise KeyError(f"unknown predictor variant {variant!r} in {name!r}")
    if base == "ols":
        return batch_ols
    if base == "zero":
        return zero_predictor
    if base not in ("posterior_mean", "argmin"):
        raise KeyError(f"unknown predictor {name!r}; known: {', '.join(PREDICTOR_NAMES)}")
    if spec is None:
        raise ValueError(f"predictor {name!r} needs a mixture spec")
    if variant == "estimated":
        if weights is None:
            raise ValueError(f"predictor {name!r} needs estimated weights")
        comps = check_components(weights, spec.d)
    else:
        comps = spec.components
    if base == "argmin":
        return lambda batch: batch_argmin(batch, comps)
    sigma = spec.sigma
    return lambda batch: batch_posterior_mean(batch, comps, sigma)


PREDICTOR_NAMES = ("posterior_mean", "argmin", "ols", "zero",
                   "posterior_mean:estimated", "argmin:estimated")


# -- estimators ----------------------------------------------------------------

class PosteriorMeanRegressor(RegressorMixin, BaseEstimator):
    """Exponential-weights posterior mean over a fixed set of components.

    Parameters
    ----------
    components : array-like, shape (m, d)
        Component vectors, either the true ones or estimates.
    sigma : float, default=1.0
        Label noise level used in the exponential weights.
    """

    def __init__(self, components=None, sigma=1.0):
        self.components = components
        self.sigma = sigma

    def fit(self, X=None, y=None):
        if self.components is None:
            raise ValueError("PosteriorMeanRegressor needs components")
        self.components_ = check_components(self.components)
        self.sigma_ = check_sigma(self.sigma)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self)
        batch = check_prompts(X)
        return batch_posterior_probs(batch, self.components_, self.sigma_)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self)
        return batch_posterior_mean(check_prompts(X), self.components_, self.sigma_)


class ArgminRegressor(RegressorMixin, BaseEstimator):
    """Predict with the single best-fitting component."""

    def __init__(self, components=None):
        self.components = components

    def fit(self, X=None, y=None):
        if self.components is None:
            raise ValueError("ArgminRegressor needs components")
        self.components_ = check_components(self.components)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self)
        return batch_argmin(check_prompts(X), self.components_)


class OLSRegressor(RegressorMixin, BaseEstimator):
    """Per-prompt minimum-norm least squares."""

    def __init__(self, rcond=OLS_RCOND):
        self.rcond = rcond

    def fit(self, X=None, y=None):
        self.rcond_ = float(self.rcond)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self)
        return batch_ols(check_prompts(X), self.rcond_)
