import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgpt.aggregate import (
    BCM,
    GPOE,
    POE,
    RBCM,
    UNIFORM,
    AggregationMethod,
    DegenerateAggregationError,
    ExpertPrediction,
    PriorMoments,
    aggregate,
    assign_weights,
    bcm_aggregate,
    entropy_weight,
    factorized_lml,
    gpoe_aggregate,
    poe_aggregate,
    rbcm_aggregate,
)
from dgpt.gp import Dataset, Hyperparameters, log_marginal_likelihood

E = ExpertPrediction


def experts_strategy(max_m=20):
    expert = st.tuples(
        st.floats(-100, 100), st.floats(0.01, 50), st.floats(0.05, 3)
    ).map(lambda t: E(*t))
    return st.lists(expert, min_size=1, max_size=max_m)


def test_expert_needs_positive_variance():
    with pytest.raises(ValueError):
        E(0.0, 0.0)


def test_method_validation():
    with pytest.raises(ValueError):
        AggregationMethod("median")
    with pytest.raises(ValueError):
        AggregationMethod(POE, "entropy")
    with pytest.raises(ValueError):
        AggregationMethod(RBCM, None)
    assert AggregationMethod.parse("RBCM").kind == RBCM
    assert AggregationMethod.parse("poe").weight_rule is None


def test_entropy_weight_examples():
    assert entropy_weight(2.0, 2.0) == 0.0
    assert entropy_weight(1.0, math.exp(-2)) == pytest.approx(1.0, abs=1e-15)
    assert entropy_weight(1.0, 0.25) - entropy_weight(1.0, 0.5) == pytest.approx(0.5 * math.log(2))
    with pytest.raises(ValueError):
        entropy_weight(0.0, 1.0)


def test_poe_examples():
    assert poe_aggregate([E(3.0, 2.0)]) == pytest.approx((3.0, 2.0))
    assert poe_aggregate([E(1, 1), E(3, 1)]) == pytest.approx((2.0, 0.5))
    assert poe_aggregate([E(4, 2)] * 5) == pytest.approx((4.0, 0.4))


def test_gpoe_examples():
    ex = [E(1, 1, 2.0), E(3, 1, 1.0)]
    m, v = gpoe_aggregate(ex)
    assert v == pytest.approx(1 / 3) and m == pytest.approx(5 / 3)
    assert gpoe_aggregate([E(4, 2, 1 / 5)] * 5) == pytest.approx((4.0, 2.0))
    with pytest.raises(ValueError):
        gpoe_aggregate([E(1, 1, 0.0)])


def test_bcm_examples():
    prior = PriorMoments(1.0)
    assert bcm_aggregate([E(2, 0.3)], prior) == pytest.approx((2.0, 0.3))
    assert bcm_aggregate([E(0, 4.0), E(0, 4.0)], PriorMoments(4.0)) == pytest.approx((0.0, 4.0))
    m, v = bcm_aggregate([E(1, 0.5), E(3, 0.5)], prior)
    assert v == pytest.approx(1 / 3) and m == pytest.approx(8 / 3)


def test_rbcm_examples():
    m, v = rbcm_aggregate([E(1, 1, 0.5), E(3, 1, 0.5)], PriorMoments(2.0))
    assert m == pytest.approx(2.0) and v == pytest.approx(1.0)


def test_degenerate_precision_raises_and_aggregate_falls_back():
    ex = [E(5.0, 1.0), E(7.0, 1.0), E(9.0, 1.0)]
    with pytest.raises(DegenerateAggregationError):
        bcm_aggregate(ex, PriorMoments(0.5))
    pred, flag = aggregate(ex, AggregationMethod(BCM, None), PriorMoments(0.5))
    assert flag and pred == (0.0, 0.5)


@settings(max_examples=60, deadline=None)
@given(experts_strategy(), st.floats(10, 1e4))
def test_reduction_identities(experts, prior_var):
    prior = PriorMoments(prior_var)
    unit = [E(e.mean, e.variance, 1.0) for e in experts]
    # beta = 1: GPoE == PoE and RBCM == BCM
    assert gpoe_aggregate(unit) == pytest.approx(poe_aggregate(experts), rel=1e-12, abs=1e-12)
    try:
        bcm = bcm_aggregate(experts, prior)
    except DegenerateAggregationError:
        bcm = None
    if bcm is not None:
        assert rbcm_aggregate(unit, prior) == pytest.approx(bcm, rel=1e-12, abs=1e-12)
    # sum of weights 1: RBCM == GPoE
    total = sum(e.weight for e in experts)
    norm = [E(e.mean, e.variance, e.weight / total) for e in experts]
    assert rbcm_aggregate(norm, prior) == pytest.approx(gpoe_aggregate(norm), rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(experts_strategy())
def test_precision_identities_direct(experts):
    mu = np.array([e.mean for e in experts])
    var = np.array([e.variance for e in experts])
    beta = np.array([e.weight for e in experts])
    prec = np.sum(beta / var)
    m, v = gpoe_aggregate(experts)
    assert 1 / v == pytest.approx(prec, rel=1e-12)
    assert m == pytest.approx(np.sum(beta * mu / var) / prec, rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(experts_strategy())
def test_mean_within_expert_range(experts):
    lo, hi = min(e.mean for e in experts), max(e.mean for e in experts)
    for pred in (poe_aggregate(experts), gpoe_aggregate(experts)):
        assert lo - 1e-9 <= pred.mean <= hi + 1e-9


@settings(max_examples=40, deadline=None)
@given(experts_strategy(8), st.randoms(use_true_random=False))
def test_permutation_invariance(experts, rnd):
    shuffled = list(experts)
    rnd.shuffle(shuffled)
    prior = PriorMoments(1e4)
    assert poe_aggregate(shuffled) == pytest.approx(poe_aggregate(experts), rel=1e-12, abs=1e-12)
    assert gpoe_aggregate(shuffled) == pytest.approx(gpoe_aggregate(experts), rel=1e-12, abs=1e-12)
    assert rbcm_aggregate(shuffled, prior) == pytest.approx(rbcm_aggregate(experts, prior), rel=1e-12, abs=1e-12)


def test_rbcm_entropy_weights_at_prior_return_prior_variance():
    ex = assign_weights([1.0, 2.0, 3.0], [5.0, 5.0, 5.0], AggregationMethod(RBCM), 5.0)
    assert all(e.weight == 0.0 for e in ex)
    # zero weights give zero data precision; only the prior term remains
    pred = rbcm_aggregate(ex, PriorMoments(5.0))
    assert pred.variance == 5.0 and pred.mean == 0.0


def test_assign_weights_rules():
    m = AggregationMethod(GPOE, UNIFORM)
    assert [e.weight for e in assign_weights([0, 0], [1, 2], m, 10)] == [0.5, 0.5]
    poe = assign_weights([0, 0], [1, 2], AggregationMethod(POE, None), 10)
    assert [e.weight for e in poe] == [1.0, 1.0]
    clipped = assign_weights([0], [20.0], AggregationMethod(GPOE, clip_negative_weights=True), 10)
    assert clipped[0].weight == 0.0


def test_factorized_lml():
    a = Dataset([[0.0], [1.0]], [0.3, -0.2])
    b = Dataset([[5.0]], [1.1])
    h = Hyperparameters(1.0, (1.0,), 0.1)
    assert factorized_lml([a], h) == log_marginal_likelihood(a, h)
    assert factorized_lml([a, b], h) == pytest.approx(factorized_lml([b, a], h), rel=1e-15)
    far = [Dataset([[0.0]], [0.5]), Dataset([[1e6]], [-0.7])]
    pooled = Dataset([[0.0], [1e6]], [0.5, -0.7])
    assert factorized_lml(far, h) == pytest.approx(log_marginal_likelihood(pooled, h), abs=1e-6)
    with pytest.raises(ValueError):
        factorized_lml([Dataset.empty(1)], h)
