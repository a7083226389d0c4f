"""Batch expectation-maximization for a mixture of linear regressions.

"Batch" means a whole prompt shares one latent component, so the E-step
assigns responsibilities to prompts rather than to individual (x, y) pairs.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import check_random_state
from ._validation import check_prompts
from .mixtures import MixtureSpec, PromptBatch, _sphere
from .predictors import batch_losses, batch_posterior_mean


class EMWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EMConfig:
    t_max: int = 20000
    tol: float = 1e-3
    ridge: float = 1e-8
    n_restarts: int = 1

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be at least 1")


@dataclass
class EMState:
    """Current weights, mixing proportions and prompt responsibilities."""

    weights: np.ndarray
    mix: np.ndarray
    resp: np.ndarray
    iteration: int = 0
    log_likelihood: float = float("-inf")
    warnings: list = field(default_factory=list)


def em_init(m: int, d: int, rng=None, n: int = 0) -> EMState:
    """Mixing weights uniform on the simplex, components uniform on the radius-sqrt(d) sphere."""
    if m < 1 or d < 1:
        raise ValueError(f"need m >= 1 and d >= 1, got m={m}, d={d}")
    rng = check_random_state(rng)
    mix = rng.dirichlet(np.ones(m))
    mix /= mix.sum()
    weights = _sphere(m, d, np.sqrt(d), rng)
    return EMState(weights, mix, np.zeros((n, m)))


def em_e_step(state: EMState, prompts, sigma: float) -> EMState:
    """Responsibilities in the log domain; also records the observed-data log-likelihood."""
    if not sigma > 0:
        raise ValueError("the E-step needs sigma > 0")
    batch = check_prompts(prompts)
    loss = batch_losses(batch, state.weights)
    with np.errstate(divide="ignore"):
        log_mix = np.log(state.mix)
    logits = log_mix[None, :] - loss / (2.0 * sigma * sigma)
    logits -= batch.k * np.log(sigma * np.sqrt(2.0 * np.pi))
    norm = logsumexp(logits, axis=1)
    if not np.all(np.isfinite(norm)):
        raise FloatingPointError("E-step produced a row with no finite log-likelihood")
    resp = np.exp(logits - norm[:, None])
    resp /= resp.sum(axis=1, keepdims=True)
    return replace(state, resp=resp, log_likelihood=float(np.sum(norm)))


def _stats(batch: PromptBatch):
    X = batch.xs[:, :-1, :]
    grams = np.einsum("nkd,nke->nde", X, X)
    moments = np.einsum("nkd,nk->nd", X, batch.ys)
    return grams, moments


def _m_step(state: EMState, grams, moments, ridge: float) -> EMState:
    resp = state.resp
    n, m = resp.shape
    d = state.weights.shape[1]
    mix = resp.sum(axis=0) / n
    A = np.einsum("nj,nde->jde", resp, grams) + ridge * np.eye(d)
    b = np.einsum("nj,nd->jd", resp, moments)
    weights = state.weights.copy()
    notes = list(state.warnings)
    for j in range(m):
        try:
            wj = np.linalg.solve(A[j], b[j])
        except np.linalg.LinAlgError:
            wj = None
        if wj is None or not np.all(np.isfinite(wj)):
            msg = f"iteration {state.iteration + 1}: singular system for component {j + 1}, kept previous weights"
            warnings.warn(msg, EMWarning, stacklevel=3)
            notes.append(msg)
            continue
        weights[j] = wj
    return replace(state, weights=weights, mix=mix, iteration=state.iteration + 1, warnings=notes)


def em_m_step(state: EMState, prompts, ridge: float = 1e-8) -> EMState:
    """Mixing weights from mean responsibilities; components by weighted ridge least squares."""
    grams, moments = _stats(check_prompts(prompts))
    return _m_step(state, grams, moments, ridge)


def stopping_distance(current: np.ndarray, previous: np.ndarray) -> float:
    """``max_j min_j' ||current_j - previous_j'||``; not symmetric in its arguments."""
    diff = current[:, None, :] - previous[None, :, :]
    return float(np.max(np.min(np.linalg.norm(diff, axis=2), axis=1)))


def _run(batch, grams, moments, m, sigma, config, rng) -> EMState:
    state = em_init(m, batch.d, rng, batch.n)
    while True:
        previous = state.weights
        state = em_e_step(state, batch, sigma)
        state = _m_step(state, grams, moments, config.ridge)
        if state.iteration >= config.t_max:
            break
        if stopping_distance(state.weights, previous) <= config.tol:
            break
    # log-likelihood of the returned parameters
    ll = em_e_step(state, batch, sigma).log_likelihood
    return replace(state, log_likelihood=ll)


def em_fit(prompts, m: int, sigma: float, config: EMConfig | None = None, rng=None,
           return_state: bool = False):
    """Fit ``m`` components by batch EM; with restarts, keep the highest-likelihood run.

    Returns the ``(m, d)`` weight matrix, or the final :class:`EMState` when
    ``return_state`` is true.
    """
    if not sigma > 0:
        raise ValueError("batch EM needs sigma > 0")
    config = config or EMConfig()
    batch = check_prompts(prompts)
    rng = check_random_state(rng)
    grams, moments = _stats(batch)
    best = None
    for _ in range(config.n_restarts):
        state = _run(batch, grams, moments, m, sigma, config, rng)
        if best is None or state.log_likelihood > best.log_likelihood:
            best = state
    return best if return_state else best.weights


def oracle_pred_error(estimated, spec: MixtureSpec, normalize: bool = False) -> float:
    """Noise variance plus mean squared distance from each true component to its nearest estimate."""
    est = np.atleast_2d(np.asarray(estimated, dtype=np.float64))
    if est.size == 0:
        raise ValueError("need at least one estimated component")
    diff = spec.components[:, None, :] - est[None, :, :]
    nearest = np.min(np.sum(diff * diff, axis=2), axis=1)
    err = spec.sigma ** 2 + float(np.mean(nearest))
    return err / spec.d if normalize else err


class BatchEM(RegressorMixin, BaseEstimator):
    """Batch EM as an estimator; ``predict`` is the posterior mean with the fitted components.

    Parameters
    ----------
    n_components : int, default=2
    sigma : float, default=1.0
        Known label noise level.
    t_max, tol, ridge, n_restarts
        See :class:`EMConfig`.
    random_state : int, Generator or None
    """

    def __init__(self, n_components=2, sigma=1.0, t_max=20000, tol=1e-3, ridge=1e-8,
                 n_restarts=1, random_state=None):
        self.n_components = n_components
        self.sigma = sigma
        self.t_max = t_max
        self.tol = tol
        self.ridge = ridge
        self.n_restarts = n_restarts
        self.random_state = random_state

    def fit(self, X, y=None):
        config = EMConfig(self.t_max, self.tol, self.ridge, self.n_restarts)
        state = em_fit(X, self.n_components, self.sigma, config, self.random_state, return_state=True)
        self.components_ = state.weights
        self.mix_ = state.mix
        self.n_iter_ = state.iteration
        self.log_likelihood_ = state.log_likelihood
        return self

    def predict(self, X):
        check_is_fitted(self)
        return batch_posterior_mean(check_prompts(X), self.components_, self.sigma)
