"""Gaussian-mixture prior over the hidden causes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GmmPrior:
    """Isotropic Gaussian mixture with one component per attractor.

    ``means`` has shape (K, p) and ``weights`` shape (K,). The shared
    component standard deviation is not stored here because the simulation
    schedules vary it over time.
    """

    means: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if weights.shape[0] != means.shape[0]:
            raise ValueError(f"{means.shape[0]} means but {weights.shape[0]} weights")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def one_hot(cls, p: int) -> "GmmPrior":
        """Means at the one-hot vectors, uniform weights."""
        return cls(np.eye(p), np.full(p, 1.0 / p))

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _check_sigma(sigma_c):
    if not sigma_c > 0:
        raise ValueError(f"sigma_c must be positive, got {sigma_c}")


def _component_logits(c, prior, sigma_c):
    # (..., K) unnormalized log responsibilities and (..., K, p) offsets mu_k - c
    diff = prior.means - np.asarray(c, dtype=float)[..., None, :]
    sq = np.einsum("...kp,...kp->...k", diff, diff)
    with np.errstate(divide="ignore"):
        log_w = np.log(prior.weights)
    return log_w - 0.5 * sq / sigma_c**2, diff


def gmm_log_density(c, prior: GmmPrior, sigma_c: float):
    """log sum_k pi_k N(c; mu_k, sigma_c^2 I), evaluated with a max shift.

    Accepts a single point of shape (p,) or a batch (..., p).
    """
    _check_sigma(sigma_c)
    logits, _ = _component_logits(c, prior, sigma_c)
    top = logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits - top).sum(axis=-1)) + top[..., 0]
    return lse - 0.5 * prior.dim * np.log(2 * np.pi * sigma_c**2)


def responsibilities(c, prior: GmmPrior, sigma_c: float) -> np.ndarray:
    """Posterior component probabilities r_k(c)."""
    _check_sigma(sigma_c)
    logits, _ = _component_logits(c, prior, sigma_c)
    r = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return r / r.sum(axis=-1, keepdims=True)


def gmm_log_density_grad(c, prior: GmmPrior, sigma_c: float) -> np.ndarray:
    """Gradient of :func:`gmm_log_density`: sum_k r_k(c) (mu_k - c) / sigma_c^2."""
    _check_sigma(sigma_c)
    logits, diff = _component_logits(c, prior, sigma_c)
    r = np.exp(logits - logits.max(axis=-1, keepdims=True))
    r /= r.sum(axis=-1, keepdims=True)
    grad = np.einsum("...k,...kp->...p", r, diff) / sigma_c**2
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite prior gradient")
    return grad
