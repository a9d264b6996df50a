import math

import numpy as np
import pytest

from dgpt.aggregate import ExpertPrediction as E
from dgpt.aggregate import gpoe_aggregate, rbcm_aggregate, PriorMoments
from dgpt.ucb import (
    UcbConfig,
    coverage_stats,
    cumulative_ucb,
    gamma_schedule,
    one_step_ucb,
    schedule_gammas,
    split_gammas,
)


def test_config_validation():
    with pytest.raises(ValueError):
        UcbConfig(delta=1.0)
    with pytest.raises(ValueError):
        UcbConfig(per_expert_split="greedy")
    assert UcbConfig().gammas(3) == split_gammas(3, 0.003)


def test_gamma_schedule_values():
    assert gamma_schedule(1, 0.1) == pytest.approx(2 * math.log(math.pi**2 / 0.6), rel=1e-12)
    assert gamma_schedule(1, 0.1) == pytest.approx(5.6006, abs=1e-4)
    g = [gamma_schedule(t, 0.01) for t in range(1, 50)]
    assert all(b > a for a, b in zip(g, g[1:]))
    with pytest.raises(ValueError):
        gamma_schedule(0, 0.1)
    # pi^2/6 lies outside (0, 1), so the degenerate gamma = 0 point is rejected
    with pytest.raises(ValueError):
        gamma_schedule(1, math.pi**2 / 6)


def test_split_gammas_hit_total_confidence():
    g = split_gammas(7, 0.003)
    assert sum(math.exp(-x / 2) for x in g) == pytest.approx(0.003, rel=1e-12)


def test_single_expert_bound():
    r = one_step_ucb([E(0.0, 4.0)], [9.0])
    assert r.bound == pytest.approx(3.0 * 2.0)
    assert r.confidence == pytest.approx(1 - math.exp(-4.5))


def test_identical_experts_bound_independent_of_m():
    for m in (1, 3, 10):
        r = one_step_ucb([E(1.0, 2.25, 0.7)] * m, [4.0] * m)
        assert r.bound == pytest.approx(2.0 * 1.5)


def test_hand_example():
    r = one_step_ucb([E(0, 1.0), E(0, 4.0)], [4.0, 4.0])
    assert r.bound == pytest.approx(2.4)


def test_argument_errors():
    with pytest.raises(ValueError):
        one_step_ucb([E(0, 1)], [1.0, 2.0])
    with pytest.raises(ValueError):
        one_step_ucb([], [])
    with pytest.raises(ValueError):
        one_step_ucb([E(0, 1)], [0.0])
    with pytest.raises(ValueError):
        one_step_ucb([E(0, 1)], [1.0], method="poe")


def test_bound_grows_with_a_worse_expert():
    base = [E(0, 1.0, 0.5), E(0, 2.0, 0.8), E(0, 0.5, 1.1)]
    g = [9.0] * 3
    b0 = one_step_ucb(base, g).bound
    worse = base[:1] + [E(0, 2.5, 0.8)] + base[2:]
    assert one_step_ucb(worse, g).bound > b0


def test_rbcm_violation_flag():
    ex = [E(0, 1.0, 2.0), E(0, 1.0, 2.0)]
    assert one_step_ucb(ex, [9.0, 9.0], "rbcm", prior_variance=1e6).approximation_violated is False
    assert one_step_ucb(ex, [9.0, 9.0], "rbcm", prior_variance=1.0).approximation_violated is True


def test_ucb_dominates_three_sigma_interval():
    # sufficient condition: every beta_i >= 9 / gamma_i, since then
    # 9 sum(a_i^2 / beta_i) <= gamma sum(a_i^2) <= gamma (sum a_i)^2 with a_i = beta_i / sigma_i
    rng = np.random.default_rng(0)
    for _ in range(300):
        m = int(rng.integers(1, 8))
        g = split_gammas(m, 0.003)
        var = rng.uniform(0.1, 5, m)
        beta = rng.uniform(9 / g[0], 4.0, m)
        ex = [E(0.0, v, b) for v, b in zip(var, beta)]
        ucb = one_step_ucb(ex, g).bound
        assert ucb >= 3 * math.sqrt(gpoe_aggregate(ex).variance) * (1 - 1e-12)
        if sum(beta) >= 1:
            # the prior term only narrows the RBCM precision when sum(beta) > 1
            rb = rbcm_aggregate(ex, PriorMoments(1e9))
            assert ucb >= 3 * math.sqrt(rb.variance) * (1 - 1e-6)


def test_dominance_can_fail_for_small_weights():
    # one expert with beta below 9 / gamma: the GPoE interval is the wider one
    g = split_gammas(1, 0.003)
    ex = [E(0.0, 1.0, 0.5)]
    assert 9 / g[0] > 0.5
    assert one_step_ucb(ex, g).bound < 3 * math.sqrt(gpoe_aggregate(ex).variance)


def test_cumulative_bound():
    step = ([E(0, 1.0), E(0, 2.0)], [9.0, 9.0])
    one = one_step_ucb(*step).bound
    assert cumulative_ucb([step]) == pytest.approx(one)
    assert cumulative_ucb([step, step]) == pytest.approx(2 * one)
    assert cumulative_ucb([]) == 0.0
    hist = [([E(0, 1.0)], None)] * 5
    partial = [cumulative_ucb(hist[:k]) for k in range(1, 6)]
    assert all(b >= a for a, b in zip(partial, partial[1:]))
    assert partial[0] == pytest.approx(math.sqrt(schedule_gammas(1, 1, 0.003)[0]))


def test_coverage_stats():
    truth = np.zeros(100)
    est = np.random.default_rng(0).normal(size=100)
    assert coverage_stats([1e9] * 100, est, truth) == (1.0, 1e9)
    assert coverage_stats([0.0] * 100, est, truth)[0] == 0.0
    with pytest.raises(ValueError):
        coverage_stats([1.0], est, truth)


def test_coverage_of_gaussian_errors_at_three_sigma():
    rng = np.random.default_rng(1)
    err = rng.normal(size=10_000)
    frac, _ = coverage_stats([3.0] * 10_000, err, np.zeros(10_000))
    assert frac == pytest.approx(0.9973, abs=0.01)
