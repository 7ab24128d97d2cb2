"""Epoch-level decay of the ground-truth feeding probability and the per-step sampler."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .numerics import Rng

DEFAULT_MU = 12.0


@dataclasses.dataclass(frozen=True)
class DecayConfig:
    mu: float = DEFAULT_MU
    epoch: int = 0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.epoch < 0:
            raise ValueError(f"epoch must be >= 0, got {self.epoch}")


def truth_prob(cfg: DecayConfig) -> float:
    """p = mu / (mu + exp(e / mu)); strictly decreasing in the epoch e.

    Evaluated as the logistic 1 / (1 + exp(x)), x = e/mu - ln mu, so large
    epochs underflow to 0 instead of overflowing.
    """
    x = cfg.epoch / cfg.mu - math.log(cfg.mu)
    if x > 0:
        z = math.exp(-x)
        return z / (1.0 + z)
    return 1.0 / (1.0 + math.exp(x))


def sample_context(truth_word, oracle_word, p: float, rng: Rng):
    """Feed ``truth_word`` with probability p, else ``oracle_word``.

    Scalars give a scalar; arrays draw one Bernoulli per entry.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    truth = np.asarray(truth_word)
    u = rng.uniform(0.0, 1.0, size=truth.shape or None)
    pick = np.where(u < p, truth, np.asarray(oracle_word))
    return int(pick) if truth.ndim == 0 else pick
