"""Comparison denoisers: truncated loss (T-CE), reweighted loss (R-CE), random drop.

These are simplified renditions: T-CE drops the largest losses of each batch
with a linearly ramped drop rate, R-CE weights each instance by the predicted
probability of its observed label raised to a power.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import bce_per_instance


@dataclass
class TceConfig:
    max_drop_rate: float = 0.2
    anneal_steps: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.max_drop_rate < 1.0:
            raise ValueError("max_drop_rate must be in [0, 1)")
        if self.anneal_steps < 1:
            raise ValueError("anneal_steps must be >= 1")

    def drop_rate(self, step: int) -> float:
        return self.max_drop_rate * min(1.0, step / self.anneal_steps)


@dataclass
class RceConfig:
    gamma: float = 0.25

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError("gamma must be finite and >= 0")


def tce_weights(losses, step: int, config: TceConfig) -> np.ndarray:
    """0/1 weights that zero out the ceil(rate * M) largest losses."""
    losses = np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    n_drop = math.ceil(config.drop_rate(step) * len(losses))
    weights = np.ones(len(losses))
    if n_drop:
        # stable sort on -loss: among equal losses the lower slot is dropped first
        order = np.argsort(-losses, kind="stable")
        weights[order[:n_drop]] = 0.0
    return weights


def rce_weights(labels, probabilities, config: RceConfig) -> np.ndarray:
    """Weight = (probability assigned to the observed label) ** gamma."""
    labels = np.asarray(labels)
    p = np.asarray(probabilities, dtype=np.float64)
    p_obs = np.where(labels == 1, p, 1.0 - p)
    if config.gamma == 0:
        return np.ones(len(p_obs))
    return np.power(p_obs, config.gamma)


def random_drop(batch_len: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Selection mask dropping exactly round(rate * M) uniformly chosen instances."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    n_drop = int(math.floor(rate * batch_len + 0.5))
    mask = np.ones(batch_len, dtype=bool)
    mask[rng.permutation(batch_len)[:n_drop]] = False
    return mask


def tce_weigher(config: TceConfig):
    """Adapter for ``train_to_convergence``: truncation as a selection mask."""

    def weigh(batch, probs, step, rng):
        w = tce_weights(bce_per_instance(batch.labels, probs), step, config)
        return w > 0, None

    return weigh


def rce_weigher(config: RceConfig):
    def weigh(batch, probs, step, rng):
        return None, rce_weights(batch.labels, probs, config)

    return weigh
