"""Upper confidence bounds on the deviation of an aggregated GP mean.

The one-step bound keeps the expert weights in both sums:

    bound = sum_i beta_i sqrt(gamma_i) / sigma_i  /  sum_i beta_i / sigma_i**2

and holds with probability at least ``1 - sum_i exp(-gamma_i / 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .aggregate import GPOE, RBCM, ExpertPrediction

DEFAULT_DELTA = 0.003  # 99.7 %, the 3-sigma level


@dataclass(frozen=True)
class UcbConfig:
    delta: float = DEFAULT_DELTA
    per_expert_split: str = "uniform"

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.per_expert_split != "uniform":
            raise ValueError(f"unknown split rule {self.per_expert_split!r}")

    def gammas(self, m: int) -> list[float]:
        return split_gammas(m, self.delta)


@dataclass(frozen=True)
class UcbResult:
    bound: float
    confidence: float
    per_expert_gamma: list[float] = field(default_factory=list)
    approximation_violated: bool = False


def gamma_schedule(t: int, delta: float) -> float:
    """gamma_t = 2 log(pi_t / delta) with pi_t = pi^2 t^2 / 6."""
    if t < 1:
        raise ValueError("t must be >= 1")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return 2.0 * np.log(np.pi**2 * t**2 / 6.0 / delta)


def split_gammas(m: int, delta_total: float) -> list[float]:
    """Equal per-expert gammas with sum_i exp(-gamma_i/2) = delta_total."""
    if m < 1:
        raise ValueError("need at least one expert")
    if not 0 < delta_total < 1:
        raise ValueError("delta must lie in (0, 1)")
    return [2.0 * np.log(m / delta_total)] * m


def schedule_gammas(t: int, m: int, delta_total: float) -> list[float]:
    """Time-indexed gammas for the cumulative bound, delta split evenly over experts."""
    return [gamma_schedule(t, delta_total / m)] * m


def one_step_ucb(
    experts: Sequence[ExpertPrediction],
    gammas: Sequence[float],
    method: str = GPOE,
    prior_variance: float | None = None,
) -> UcbResult:
    if len(experts) == 0 or len(experts) != len(gammas):
        raise ValueError("experts and gammas must be non-empty and equally long")
    method = method.lower()
    if method not in (GPOE, RBCM):
        raise ValueError(f"bounds exist for gpoe and rbcm only, not {method!r}")
    g = np.asarray(gammas, dtype=float)
    if np.any(g <= 0):
        raise ValueError("gammas must be positive")
    sd = np.sqrt([e.variance for e in experts])
    beta = np.array([e.weight for e in experts], dtype=float)
    denom = np.sum(beta / sd**2)
    bound = float(np.sum(beta * np.sqrt(g) / sd) / denom)
    confidence = float(1.0 - np.sum(np.exp(-g / 2.0)))

    violated = False
    if method == RBCM and prior_variance is not None:
        # dropped prior-correction term should stay below 1 % of the data term
        correction = abs(1.0 - beta.sum()) / prior_variance
        violated = bool(correction > 0.01 * abs(denom))
    return UcbResult(max(bound, 0.0), confidence, list(g), violated)


def cumulative_ucb(history: Sequence[tuple], delta: float = DEFAULT_DELTA) -> float:
    """Sum of per-step GPoE bounds.

    Each history item is ``(experts, gammas)``; ``gammas=None`` takes the
    time-indexed schedule for that step (steps numbered from 1).
    """
    total = 0.0
    for t, (experts, gammas) in enumerate(history, start=1):
        if gammas is None:
            gammas = schedule_gammas(t, len(experts), delta)
        total += one_step_ucb(experts, gammas, GPOE).bound
    return total


def coverage_stats(bounds, estimates, truth) -> tuple[float, float]:
    """Fraction of steps where ``|truth - estimate| <= bound`` and the mean bound."""
    b = np.array([r.bound if isinstance(r, UcbResult) else r for r in bounds], dtype=float)
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if not (b.shape == est.shape == tru.shape):
        raise ValueError("bounds, estimates and truth must be aligned")
    if b.size == 0:
        raise ValueError("nothing to score")
    covered = np.abs(tru - est) <= b
    return float(covered.mean()), float(b.mean())
