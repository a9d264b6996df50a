"""Hybrid Bayesian update: GP next-step prior times a Poisson clutter likelihood.

The likelihood of a scan is ``prod_j (lambda_c / A + lambda_T N(z_j; x, s^2))``.
Its Gaussian surrogate has moments ``((lambda_T s)^2 / n, lambda_c / A + lambda_T x)``
and combines with the prior in closed form. All functions act on one
coordinate; the 2-D filter applies them to X and Y independently.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .gp import Prediction

MAX_PARTITION_SIZE = 8


@dataclass(frozen=True)
class PoissonLikelihoodParams:
    lambda_target: float = 1.0
    lambda_clutter: float = 0.0
    sensing_area: float = np.pi * 50.0**2
    noise_variance: float = 1.0

    def __post_init__(self):
        if not self.lambda_target > 0:
            raise ValueError("lambda_target must be positive")
        if self.lambda_clutter < 0:
            raise ValueError("lambda_clutter must be non-negative")
        if not self.sensing_area > 0:
            raise ValueError("sensing_area must be positive")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")

    @property
    def clutter_density(self) -> float:
        return self.lambda_clutter / self.sensing_area


def likelihood_moments(n_t: int, state: float, p: PoissonLikelihoodParams) -> tuple[float, float]:
    if n_t < 1:
        raise ValueError("moments are undefined without measurements")
    sigma_hat_sq = p.lambda_target**2 * p.noise_variance / n_t
    mu_hat = p.clutter_density + p.lambda_target * state
    return mu_hat, sigma_hat_sq


def posterior_update(
    prior: Prediction, measurements_1d: Sequence[float], p: PoissonLikelihoodParams
) -> Prediction:
    if not prior.variance > 0:
        raise ValueError("prior variance must be positive")
    z = np.asarray(measurements_1d, dtype=float)
    n = z.size
    if n == 0:
        return Prediction(float(prior.mean), float(prior.variance))
    lt = p.lambda_target
    _, s_hat = likelihood_moments(n, 0.0, p)
    v0 = prior.variance
    denom = s_hat + n * v0 * lt**2
    mean = (prior.mean * s_hat + v0 * np.sum(z * lt - lt * p.clutter_density)) / denom
    var = s_hat * v0 / denom
    return Prediction(float(mean), float(var))


def _log_normal(z, mean, var):
    return -0.5 * np.log(2 * np.pi * var) - 0.5 * (z - mean) ** 2 / var


def product_likelihood(measurements_1d, state: float, p: PoissonLikelihoodParams) -> float:
    z = np.asarray(measurements_1d, dtype=float)
    if z.size == 0:
        return 0.0
    target = np.log(p.lambda_target) + _log_normal(z, state, p.noise_variance)
    if p.lambda_clutter == 0:
        return float(target.sum())
    clutter = np.full_like(z, np.log(p.clutter_density))
    return float(np.logaddexp(clutter, target).sum())


def partition_sum_likelihood(measurements_1d, state: float, p: PoissonLikelihoodParams) -> float:
    """Log of the explicit sum over every target/clutter labelling of the scan."""
    z = np.asarray(measurements_1d, dtype=float)
    if z.size > MAX_PARTITION_SIZE:
        raise OverflowError(f"partition enumeration limited to {MAX_PARTITION_SIZE} measurements")
    if z.size == 0:
        return 0.0
    log_target = np.log(p.lambda_target) + _log_normal(z, state, p.noise_variance)
    log_clutter = (
        np.full_like(z, np.log(p.clutter_density)) if p.lambda_clutter > 0 else np.full_like(z, -np.inf)
    )
    terms = []
    for labels in itertools.product((0, 1), repeat=z.size):
        is_target = np.array(labels, dtype=bool)
        terms.append(np.sum(np.where(is_target, log_target, log_clutter)))
    return float(logsumexp(terms))


def hybrid_step(
    tracker_prior: Sequence[Prediction],
    pooled_measurements,
    p: PoissonLikelihoodParams,
) -> list[Prediction]:
    """Coordinate-wise posterior from the tracker's prior and every pooled measurement."""
    z = np.asarray(pooled_measurements, dtype=float)
    if z.size == 0:
        z = z.reshape(0, len(tracker_prior))
    if z.ndim != 2 or z.shape[1] != len(tracker_prior):
        raise ValueError(f"measurements {z.shape} do not match {len(tracker_prior)} coordinates")
    return [posterior_update(prior, z[:, k], p) for k, prior in enumerate(tracker_prior)]
