import math

import numpy as np
import pytest

from dgpt.cli import conjugate_reference
from dgpt.gp import Prediction
from dgpt.hybrid import (
    PoissonLikelihoodParams,
    hybrid_step,
    likelihood_moments,
    partition_sum_likelihood,
    posterior_update,
    product_likelihood,
)

P = PoissonLikelihoodParams


def test_params_validation():
    for kw in ({"lambda_target": 0}, {"lambda_clutter": -1}, {"sensing_area": 0}, {"noise_variance": 0}):
        with pytest.raises(ValueError):
            P(**kw)


def test_moments_examples():
    assert likelihood_moments(1, 3.0, P())[1] == 1.0
    assert likelihood_moments(4, 7.5, P())[0] == 7.5
    p = P(lambda_target=2, lambda_clutter=5, noise_variance=9)
    mu, s2 = likelihood_moments(4, 10.0, p)
    assert s2 == pytest.approx(9.0)
    assert mu == pytest.approx(20.000637, abs=1e-6)
    with pytest.raises(ValueError):
        likelihood_moments(0, 0.0, P())


def test_posterior_examples():
    prior = Prediction(1.5, 2.0)
    assert posterior_update(prior, [], P()) == prior
    post = posterior_update(Prediction(0.0, 1.0), [2.0], P())
    assert post.mean == pytest.approx(1.0) and post.variance == pytest.approx(0.5)
    z = [3.0, 4.0, 8.0]
    wide = posterior_update(Prediction(0.0, 1e9), z, P())
    assert wide.mean == pytest.approx(np.mean(z), abs=1e-3)
    with pytest.raises(ValueError):
        posterior_update(Prediction(0.0, 0.0), [1.0], P())


def test_single_measurement_matches_textbook_update():
    rng = np.random.default_rng(0)
    for _ in range(100):
        prior = Prediction(rng.normal(0, 5), rng.uniform(0.1, 10))
        s2 = rng.uniform(0.1, 5)
        z = [rng.normal(0, 5)]
        post = posterior_update(prior, z, P(noise_variance=s2))
        ref = conjugate_reference(prior, z, s2)
        assert post.mean == pytest.approx(ref.mean, rel=1e-12, abs=1e-12)
        assert post.variance == pytest.approx(ref.variance, rel=1e-12)


def test_many_measurements_use_surrogate_variance():
    prior = Prediction(2.0, 3.0)
    z = [1.0, 4.0, -2.0, 0.5]
    post = posterior_update(prior, z, P(noise_variance=2.0))
    ref = conjugate_reference(prior, z, 2.0 / len(z))
    assert post.mean == pytest.approx(ref.mean, rel=1e-13)
    assert post.variance == pytest.approx(ref.variance, rel=1e-13)


def test_order_invariance_and_variance_monotone():
    rng = np.random.default_rng(1)
    z = rng.normal(size=6)
    p = P(lambda_clutter=2.0)
    prior = Prediction(0.3, 4.0)
    a = posterior_update(prior, z, p)
    b = posterior_update(prior, z[::-1].copy(), p)
    assert a.mean == pytest.approx(b.mean, rel=1e-15) and a.variance == b.variance
    variances = [posterior_update(prior, z[:n], p).variance for n in range(1, 7)]
    assert all(v2 < v1 for v1, v2 in zip(variances, variances[1:]))
    assert variances[0] < prior.variance


def test_product_likelihood_examples():
    p = P(lambda_target=2.0, noise_variance=3.0)
    assert product_likelihood([5.0], 5.0, p) == pytest.approx(math.log(2.0) - 0.5 * math.log(2 * math.pi * 3.0))
    assert product_likelihood([], 0.0, p) == 0.0
    z = np.array([1.0, 3.0, -2.0])
    q = P(lambda_clutter=1.5)
    assert product_likelihood(z, 0.4, q) == pytest.approx(product_likelihood(z[::-1], 0.4, q), rel=1e-15)
    tiny = P(lambda_target=1e-300, lambda_clutter=2.0)
    expect = 3 * math.log(2.0 / tiny.sensing_area)
    assert product_likelihood(z, 0.0, tiny) == pytest.approx(expect, rel=1e-12)
    assert product_likelihood(z, 50.0, tiny) == pytest.approx(expect, rel=1e-12)


def test_partition_sum_matches_product():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(1, 7))
        p = P(rng.uniform(0.2, 3), float(rng.choice([0.1, 1.0, 5.0])), noise_variance=rng.uniform(0.5, 10))
        z = rng.normal(0, 20, n)
        s = rng.normal(0, 5)
        a, b = product_likelihood(z, s, p), partition_sum_likelihood(z, s, p)
        assert abs(a - b) <= 1e-9 * abs(b)


def test_partition_sum_edge_cases():
    p = P(lambda_clutter=2.0)
    two_terms = math.log(2.0 / p.sensing_area + math.exp(-0.5 * 4) / math.sqrt(2 * math.pi))
    assert partition_sum_likelihood([2.0], 0.0, p) == pytest.approx(two_terms, rel=1e-12)
    clean = P()
    z = [0.1, -0.3]
    assert partition_sum_likelihood(z, 0.0, clean) == pytest.approx(product_likelihood(z, 0.0, clean), rel=1e-14)
    with pytest.raises(OverflowError):
        partition_sum_likelihood(np.zeros(9), 0.0, p)


def test_hybrid_step_coordinatewise():
    priors = [Prediction(0.0, 4.0), Prediction(10.0, 1.0)]
    z = np.array([[1.0, 9.0], [2.0, 11.0], [0.5, 10.5]])
    p = P(lambda_clutter=1.0)
    out = hybrid_step(priors, z, p)
    for k in range(2):
        assert out[k] == posterior_update(priors[k], z[:, k], p)
        assert out[k].variance < priors[k].variance
    assert hybrid_step(priors, np.empty((0, 2)), p) == priors
    with pytest.raises(ValueError):
        hybrid_step(priors, np.zeros((3, 3)), p)
