"""Gumbel-Max perturbation of logits."""

from __future__ import annotations

import dataclasses

import numpy as np

from .numerics import Rng, log_softmax_array, softmax_array

U_EPS = 1e-12


@dataclasses.dataclass
class GumbelConfig:
    tau: float
    rng: Rng

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), U_EPS, 1.0 - U_EPS)
    return -np.log(-np.log(u))


def gumbel_noise(rng: Rng, shape) -> np.ndarray:
    """Standard Gumbel(0, 1) samples: -log(-log u), u ~ U(0, 1)."""
    return gumbel_from_uniform(rng.uniform(0.0, 1.0, size=shape))


def perturbed_logits(logits, cfg: GumbelConfig) -> np.ndarray:
    o = np.asarray(logits, dtype=np.float64)
    return (o + gumbel_noise(cfg.rng, o.shape)) / cfg.tau


def perturb(logits, cfg: GumbelConfig) -> np.ndarray:
    """softmax((o + eta) / tau) along the last axis."""
    return softmax_array(perturbed_logits(logits, cfg), axis=-1)


def log_probs(logits, noise: GumbelConfig | None = None) -> np.ndarray:
    """Log of P (no noise) or of the perturbed distribution."""
    o = np.asarray(logits, dtype=np.float64)
    if noise is not None:
        o = perturbed_logits(o, noise)
    return log_softmax_array(o, axis=-1)
