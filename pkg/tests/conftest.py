import numpy as np
import pytest

from mixicl.mixtures import MixtureSpec, Prompt


@pytest.fixture
def pm_spec():
    """Two opposite components in one dimension, unit noise."""
    return MixtureSpec(np.array([[1.0], [-1.0]]), 1.0)


@pytest.fixture
def pm_prompt():
    """One labelled pair (1, 1) and query 2."""
    return Prompt(np.array([[1.0], [2.0]]), np.array([1.0]))
