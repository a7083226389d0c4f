"""Input checks shared by the estimators and the functional API."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .mixtures import MixtureSpec, Prompt, PromptBatch, as_batch


def check_prompts(X) -> PromptBatch:
    """Accept a PromptBatch, a Prompt, a list of Prompts or an ``(xs, ys)`` pair."""
    if isinstance(X, tuple) and len(X) == 2 and not isinstance(X[0], Prompt):
        X = PromptBatch(X[0], X[1])
    batch = as_batch(X)
    if not (np.all(np.isfinite(batch.xs)) and np.all(np.isfinite(batch.ys))):
        raise ValueError("prompts contain NaN or infinite values")
    return batch


def check_components(components, d: int | None = None) -> np.ndarray:
    if isinstance(components, MixtureSpec):
        components = components.components
    w = check_array(components, dtype=np.float64, ensure_2d=True)
    if d is not None and w.shape[1] != d:
        raise ValueError(f"components have dimension {w.shape[1]} but prompts have dimension {d}")
    return w


def check_sigma(sigma) -> float:
    sigma = float(sigma)
    if not (sigma >= 0.0 and np.isfinite(sigma)):
        raise ValueError(f"sigma must be finite and nonnegative, got {sigma}")
    return sigma
