"""Shared test data."""

import numpy as np


def random_panel(rng, T=200, D=4, P=9, K=3):
    """Experts with distinct biases around noisy observations."""
    y = rng.normal(size=(T, D))
    base = np.sort(rng.normal(size=(T, D, P)), axis=-1)
    bias = rng.normal(scale=0.8, size=K)
    spread = rng.uniform(0.6, 1.6, size=K)
    X = y[..., None, None] * 0.5 + base[..., None] * spread + bias
    return X, y
