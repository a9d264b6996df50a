"""Aggregation of local expert predictions: PoE, GPoE, BCM and RBCM.

Each rule works on precisions. ``weight`` on an :class:`ExpertPrediction` is
ignored by PoE and BCM.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gp import Dataset, Hyperparameters, Prediction, log_marginal_likelihood

POE, GPOE, BCM, RBCM = "poe", "gpoe", "bcm", "rbcm"
KINDS = (POE, GPOE, BCM, RBCM)
ENTROPY, UNIFORM = "entropy", "uniform"


class DegenerateAggregationError(ArithmeticError):
    """Aggregated precision came out non-positive."""


@dataclass(frozen=True)
class ExpertPrediction:
    mean: float
    variance: float
    weight: float = 1.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"expert variance must be positive, got {self.variance}")


@dataclass(frozen=True)
class AggregationMethod:
    kind: str = RBCM
    weight_rule: str | None = ENTROPY
    clip_negative_weights: bool = False

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown aggregation {self.kind!r}")
        weighted = kind in (GPOE, RBCM)
        if weighted and self.weight_rule not in (ENTROPY, UNIFORM):
            raise ValueError(f"{kind} needs weight_rule 'entropy' or 'uniform'")
        if not weighted and self.weight_rule is not None:
            raise ValueError(f"{kind} takes no weight rule")

    @classmethod
    def parse(cls, kind: str, weight_rule: str = ENTROPY) -> "AggregationMethod":
        kind = kind.lower()
        return cls(kind, weight_rule if kind in (GPOE, RBCM) else None)

    @property
    def weighted(self) -> bool:
        return self.kind in (GPOE, RBCM)


@dataclass(frozen=True)
class PriorMoments:
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("prior variance must be positive")


def entropy_weight(prior_var: float, expert_var: float) -> float:
    """Half the log-ratio of prior to expert variance; negative if the expert is wider."""
    if not (prior_var > 0 and expert_var > 0):
        raise ValueError("variances must be positive")
    return 0.5 * (np.log(prior_var) - np.log(expert_var))


def _arrays(experts: Sequence[ExpertPrediction]):
    if len(experts) == 0:
        raise ValueError("need at least one expert")
    mu = np.array([e.mean for e in experts], dtype=float)
    var = np.array([e.variance for e in experts], dtype=float)
    beta = np.array([e.weight for e in experts], dtype=float)
    return mu, var, beta


def _finish(precision: float, weighted_sum: float) -> Prediction:
    variance = 1.0 / precision
    return Prediction(variance * weighted_sum, variance)


def poe_aggregate(experts: Sequence[ExpertPrediction]) -> Prediction:
    mu, var, _ = _arrays(experts)
    prec = 1.0 / var
    return _finish(prec.sum(), np.sum(prec * mu))


def gpoe_aggregate(experts: Sequence[ExpertPrediction]) -> Prediction:
    mu, var, beta = _arrays(experts)
    if not beta.sum() > 0:
        raise ValueError("GPoE weights must have a positive sum")
    prec = beta / var
    total = prec.sum()
    if not total > 0:
        raise DegenerateAggregationError(f"GPoE precision {total} is not positive")
    return _finish(total, np.sum(prec * mu))


def bcm_aggregate(experts: Sequence[ExpertPrediction], prior: PriorMoments) -> Prediction:
    mu, var, _ = _arrays(experts)
    prec = 1.0 / var
    total = prec.sum() + (1 - len(mu)) / prior.variance
    if not total > 0:
        raise DegenerateAggregationError(f"BCM precision {total} is not positive")
    return _finish(total, np.sum(prec * mu))


def rbcm_aggregate(experts: Sequence[ExpertPrediction], prior: PriorMoments) -> Prediction:
    mu, var, beta = _arrays(experts)
    prec = beta / var
    total = prec.sum() + (1.0 - beta.sum()) / prior.variance
    if not total > 0:
        raise DegenerateAggregationError(f"RBCM precision {total} is not positive")
    return _finish(total, np.sum(prec * mu))


def assign_weights(
    means: Sequence[float],
    variances: Sequence[float],
    method: AggregationMethod,
    prior_variance: float,
) -> list[ExpertPrediction]:
    """Attach the method's weights (entropy or uniform) to raw expert moments."""
    m = len(means)
    if method.weighted and method.weight_rule == UNIFORM:
        weights = [1.0 / m] * m
    elif method.weighted:
        weights = [entropy_weight(prior_variance, v) for v in variances]
        if method.clip_negative_weights:
            weights = [max(w, 0.0) for w in weights]
    else:
        weights = [1.0] * m
    return [ExpertPrediction(mu, v, w) for mu, v, w in zip(means, variances, weights)]


def aggregate(
    experts: Sequence[ExpertPrediction], method: AggregationMethod, prior: PriorMoments
) -> tuple[Prediction, bool]:
    """Dispatch on ``method``; a degenerate result falls back to the prior.

    Returns the prediction and a flag that is True when the fallback was used.
    """
    try:
        if method.kind == POE:
            return poe_aggregate(experts), False
        if method.kind == GPOE:
            return gpoe_aggregate(experts), False
        if method.kind == BCM:
            return bcm_aggregate(experts, prior), False
        return rbcm_aggregate(experts, prior), False
    except (DegenerateAggregationError, ValueError):
        if not experts:
            raise
        return Prediction(0.0, prior.variance), True


def factorized_lml(datasets: Sequence[Dataset], h: Hyperparameters) -> float:
    live = [d for d in datasets if len(d)]
    if not live:
        raise ValueError("all datasets are empty")
    return float(sum(log_marginal_likelihood(d, h) for d in live))
