"""The following test cases verify the feature [Priors](../reqs/reqs.md#4-feature-priors) described in the
requirements.

The test cases do not need any prior condition before being executed, unless explicitly stated otherwise.
"""
import logging

import numpy as np
import pytest
from scipy import integrate, stats

import flexcausal as fc
from flexcausal.priors import sample_tree_leaf_count


def setup_module():
    fc.set_logging_level(logging.CRITICAL)


def teardown_module():
    pass


def test__split_probability_qkit():
    """**Description**: Checks the depth-dependent split probability

    **Requirements tested**:

    - [24001](../reqs/reqs.md#req-id-24001) Tree structure prior

    **Evaluation criteria**:

    - Check the values at depth 0 and 1 for alpha 0.95 and beta 2
    - Check invalid parameters raise `ConfigError`
    """
    params = fc.TreePriorParams()

    assert fc.split_prob(0, params) == pytest.approx(0.95)
    assert fc.split_prob(1, params) == pytest.approx(0.2375)
    with pytest.raises(fc.ConfigError):
        fc.TreePriorParams(alpha=1.0)
    with pytest.raises(fc.ConfigError):
        fc.TreePriorParams(beta=-1.0)


def test__expected_leaf_count_qkit():
    """**Description**: Compares the analytic leaf count of the structure prior with simulation

    **Requirements tested**:

    - [24001](../reqs/reqs.md#req-id-24001) Tree structure prior

    **Actions to be performed**:

    - Draw 20000 trees from the default structure prior

    **Evaluation criteria**:

    - Check the analytic mean lies in [2.5, 3.5] and the simulated mean is within 0.05 of it
    """
    params = fc.TreePriorParams()
    rng = np.random.default_rng(11)

    analytic = fc.expected_leaf_count(params)
    simulated = np.mean([sample_tree_leaf_count(params, rng) for _ in range(20000)])

    assert 2.5 <= analytic <= 3.5
    assert simulated == pytest.approx(analytic, abs=0.05)


def test__leaf_posterior_qkit():
    """**Description**: Checks the conjugate leaf posterior

    **Requirements tested**:

    - [24002](../reqs/reqs.md#req-id-24002) Conjugate leaf prior

    **Evaluation criteria**:

    - Check an empty leaf returns the prior
    - Check the posterior of a populated leaf against the Normal-Normal formulas
    """
    assert fc.leaf_posterior(0, 0.0, 0.8, 0.3) == (0.0, pytest.approx(0.3))

    mean, sd = fc.leaf_posterior(10, 4.0, 0.5, 0.2)
    precision = 1.0 / 0.2 ** 2 + 10 / 0.5 ** 2
    assert sd == pytest.approx(np.sqrt(1.0 / precision))
    assert mean == pytest.approx(4.0 / 0.5 ** 2 / precision)


def test__marginal_likelihood_qkit():
    """**Description**: Compares the closed-form leaf marginal likelihood with numerical integration

    **Requirements tested**:

    - [24002](../reqs/reqs.md#req-id-24002) Conjugate leaf prior

    **Actions to be performed**:

    - Integrate the Normal likelihood of 3 residuals against the Normal prior of the leaf mean

    **Evaluation criteria**:

    - Check both log values agree to 1e-7
    - Check an empty leaf contributes 0
    """
    resid = np.array([0.3, -0.1, 0.8])
    sigma, leaf_sd = 0.7, 0.5

    def integrand(m):
        return np.exp(np.sum(stats.norm.logpdf(resid, m, sigma)) + stats.norm.logpdf(m, 0.0, leaf_sd))

    value, _ = integrate.quad(integrand, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-12)
    closed = fc.marginal_loglik(resid.size, resid.sum(), np.dot(resid, resid), sigma, leaf_sd)

    assert closed == pytest.approx(np.log(value), abs=1e-7)
    assert fc.marginal_loglik(0, 0.0, 0.0, sigma, leaf_sd) == 0.0


def test__leaf_scale_calibration_qkit():
    """**Description**: Calibrates the leaf prior scales

    **Requirements tested**:

    - [24002](../reqs/reqs.md#req-id-24002) Conjugate leaf prior

    **Evaluation criteria**:

    - Check the μ scale follows the outcome range and the τ sum has prior sd 0.5
    """
    leaf = fc.LeafPriorParams.calibrate(np.array([-1.5, 0.0, 2.5]), mu_trees=200, tau_trees=50)

    assert leaf.leaf_sd_mu == pytest.approx(4.0 / (4.0 * np.sqrt(200)))
    assert leaf.leaf_sd_tau * np.sqrt(50) == pytest.approx(0.5)
    unit_range = fc.LeafPriorParams.calibrate(np.array([0.0, 1.0]), mu_trees=200, tau_trees=50)
    assert unit_range.leaf_sd_mu == pytest.approx(0.5 / (2.0 * np.sqrt(200)))
    with pytest.raises(fc.ConfigError):
        fc.LeafPriorParams(0.0, 1.0)


def test__noise_prior_qkit():
    """**Description**: Calibrates the noise prior and draws the noise sd

    **Requirements tested**:

    - [24003](../reqs/reqs.md#req-id-24003) Noise prior

    **Actions to be performed**:

    - Calibrate on a noise estimate of 0.8 with quantile 0.9
    - Draw the noise sd 20000 times for a fixed residual sum of squares

    **Evaluation criteria**:

    - Check the prior puts probability 0.9 below the estimate
    - Check the mean of the drawn variances matches the inverse gamma posterior mean within 2 %
    """
    prior = fc.NoisePriorParams.calibrate(0.8, nu=3.0, q=0.9)
    rng = np.random.default_rng(5)

    draws = np.array([fc.draw_sigma(40.0, 100, prior, rng) for _ in range(20000)])
    shape, scale = (prior.nu + 100) / 2.0, (prior.nu * prior.lam + 40.0) / 2.0

    assert prior.distribution().cdf(0.8 ** 2) == pytest.approx(0.9)
    assert np.all(draws > 0.0)
    assert np.mean(draws ** 2) == pytest.approx(scale / (shape - 1.0), rel=0.02)


def test__split_probabilities_qkit():
    """**Description**: Updates the splitting probabilities

    **Requirements tested**:

    - [24004](../reqs/reqs.md#req-id-24004) Splitting probabilities

    **Actions to be performed**:

    - Update a uniform vector and Dirichlet vectors with a strong count on the first variable

    **Evaluation criteria**:

    - Check the uniform vector is returned unchanged
    - Check Dirichlet draws are probability vectors whose mean matches the posterior mean
    - Check a tiny concentration on 50 variables still gives finite probabilities
    """
    rng = np.random.default_rng(2)
    counts = np.array([10, 0, 0, 0])
    uniform = fc.SplitProbVector.uniform(4)
    dirichlet = fc.SplitProbVector.uniform(4, mode='dirichlet', concentration=1.0)

    assert fc.update_split_probs(counts, uniform, rng) is uniform
    draws = np.array([fc.update_split_probs(counts, dirichlet, rng).s for _ in range(5000)])
    np.testing.assert_allclose(draws.sum(axis=1), 1.0)
    assert draws[:, 0].mean() == pytest.approx(10.25 / 11.0, abs=0.01)

    sparse = fc.SplitProbVector.uniform(50, mode='dirichlet', concentration=1e-3)
    s = fc.update_split_probs(np.zeros(50), sparse, rng).s
    assert np.all(np.isfinite(s)) and s.sum() == pytest.approx(1.0)
    with pytest.raises(fc.ConfigError):
        fc.SplitProbVector.uniform(3, mode='sparse')
