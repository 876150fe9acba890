"""Module providing the priors of the causal forest: tree structure, conjugate leaf and noise priors, and the
Dirichlet prior on splitting variables.

Every function is pure; random draws come from an injected `numpy.random.Generator`.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .about import __package__
from .errors import ConfigError

# Access the logger created in __init__.py
logger = logging.getLogger(__package__)

SPARSITY_MODES = ('uniform', 'dirichlet')


@dataclass(frozen=True)
class TreePriorParams:
    """Split probability `alpha * (1 + depth) ** -beta` of a node at `depth`."""
    alpha: float = 0.95
    beta: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f'Tree prior alpha must lie in (0, 1), got {self.alpha}')
        if self.beta < 0.0:
            raise ConfigError(f'Tree prior beta must be >= 0, got {self.beta}')


@dataclass(frozen=True)
class LeafPriorParams:
    """Prior standard deviations of the leaf means, standardized-outcome units."""
    leaf_sd_mu: float
    leaf_sd_tau: float

    def __post_init__(self):
        if not (self.leaf_sd_mu > 0.0 and self.leaf_sd_tau > 0.0):
            raise ConfigError(f'Leaf prior scales must be positive, got {self.leaf_sd_mu}, {self.leaf_sd_tau}')

    @classmethod
    def calibrate(cls, y_std, mu_trees, tau_trees, k=2.0):
        """Classical BART scale for μ mapped onto the standardized outcome, and a τ sum with prior sd 0.5.

        `leaf_sd_mu` is `range(y_std) / (2 k sqrt(mu_trees))`. It equals the fixed `0.5 / (2 sqrt(200))` of 200 trees
        only for an outcome range of 1; a standardized outcome usually spans about 6 units, so expect a μ leaf scale
        about 6 times larger. Pass explicit `LeafPriorParams` for the fixed value.
        """
        spread = float(np.max(y_std) - np.min(y_std)) if np.size(y_std) else 1.0
        spread = spread if spread > 0.0 else 1.0
        return cls(leaf_sd_mu=spread / (2.0 * k * np.sqrt(mu_trees)), leaf_sd_tau=0.5 / np.sqrt(tau_trees))


@dataclass
class SplitProbVector:
    """Probabilities of choosing each covariate as splitting variable.

    Attributes:
        s (ndarray): Probability vector over the forest's covariates.
        concentration (float): Dirichlet concentration, spread evenly over the covariates.
        mode (str): `uniform` keeps `s = 1/p`; `dirichlet` resamples `s` after every sweep.
    """
    s: np.ndarray
    concentration: float = 1.0
    mode: str = 'uniform'

    def __post_init__(self):
        if self.mode not in SPARSITY_MODES:
            raise ConfigError(f'Unknown sparsity mode {self.mode!r}, expected one of {SPARSITY_MODES}')
        if self.concentration <= 0.0:
            raise ConfigError(f'Dirichlet concentration must be positive, got {self.concentration}')

    @classmethod
    def uniform(cls, p, mode='uniform', concentration=1.0):
        return cls(s=np.full(p, 1.0 / p), concentration=concentration, mode=mode)

    @property
    def p(self):
        return self.s.size


@dataclass(frozen=True)
class NoisePriorParams:
    """Scaled inverse chi-square prior `sigma^2 ~ nu * lam / chi2(nu)`.

    `lam` is calibrated so that `P(sigma < sigma_hat) = q`.
    """
    nu: float = 3.0
    lam: float = 1.0
    q: float = 0.9

    def __post_init__(self):
        if not (self.nu > 0.0 and self.lam > 0.0 and 0.0 < self.q < 1.0):
            raise ConfigError(f'Invalid noise prior nu={self.nu}, lam={self.lam}, q={self.q}')

    @classmethod
    def calibrate(cls, sigma_hat, nu=3.0, q=0.9):
        lam = sigma_hat ** 2 * stats.chi2.ppf(1.0 - q, nu) / nu
        return cls(nu=nu, lam=float(lam), q=q)

    def distribution(self):
        """Prior of sigma^2 as a frozen scipy distribution."""
        return stats.invgamma(a=self.nu / 2.0, scale=self.nu * self.lam / 2.0)


def split_prob(depth, params):
    """Prior probability that a node at `depth` is internal.

    Example:
    ```py
    import flexcausal as fc

    fc.split_prob(1, fc.TreePriorParams(0.95, 2.0))
    # 0.2375
    ```
    """
    return params.alpha * (1.0 + depth) ** (-params.beta)


def expected_leaf_count(params, max_depth=32):
    """Mean number of leaves of a tree drawn from the structure prior."""
    expected = 1.0
    for depth in range(max_depth - 1, -1, -1):
        p = split_prob(depth, params)
        expected = (1.0 - p) + p * 2.0 * expected
    return expected


def sample_tree_leaf_count(params, rng, max_depth=32):
    """Leaf count of one tree drawn from the structure prior by brute-force simulation."""
    leaves = 0
    frontier = [0]
    while frontier:
        depth = frontier.pop()
        if depth < max_depth and rng.random() < split_prob(depth, params):
            frontier.extend((depth + 1, depth + 1))
        else:
            leaves += 1
    return leaves


def leaf_posterior(n_leaf, resid_sum, sigma, leaf_sd):
    """Conjugate Normal posterior of a leaf mean.

    Returns:
        (tuple): `(mean, sd)` with variance `1 / (1 / leaf_sd^2 + n_leaf / sigma^2)` and mean
        `variance * resid_sum / sigma^2`.
    """
    variance = 1.0 / (1.0 / leaf_sd ** 2 + n_leaf / sigma ** 2)
    return variance * resid_sum / sigma ** 2, float(np.sqrt(variance))


def marginal_loglik(n_leaf, resid_sum, resid_sumsq, sigma, leaf_sd):
    """Log of the leaf likelihood with the leaf mean integrated out against its Normal prior."""
    if n_leaf == 0:
        return 0.0
    sigma2 = sigma ** 2
    tau2 = leaf_sd ** 2
    denom = sigma2 + n_leaf * tau2
    return (-0.5 * n_leaf * np.log(2.0 * np.pi * sigma2)
            - resid_sumsq / (2.0 * sigma2)
            + 0.5 * np.log(sigma2 / denom)
            + tau2 * resid_sum ** 2 / (2.0 * sigma2 * denom))


def draw_sigma(total_sse, n, prior, rng):
    """Draws the noise sd from `sigma^2 ~ InvGamma((nu + n) / 2, (nu * lam + total_sse) / 2)`."""
    shape = (prior.nu + n) / 2.0
    scale = (prior.nu * prior.lam + total_sse) / 2.0
    return float(np.sqrt(scale / rng.gamma(shape)))


def _dirichlet(alpha, rng):
    # log-space draw: G(a) = G(a + 1) * U ** (1 / a) stays representable for shapes far below 1
    log_g = np.log(rng.gamma(alpha + 1.0)) + np.log(rng.random(alpha.size)) / alpha
    weights = np.exp(log_g - np.max(log_g))
    return weights / np.sum(weights)


def update_split_probs(split_counts, sp, rng):
    """Posterior draw of the splitting probabilities given per-variable split counts.

    Uniform mode returns `sp` unchanged; Dirichlet mode draws
    `s ~ Dirichlet(concentration / p + count_1, ..., concentration / p + count_p)`.
    """
    if sp.mode == 'uniform':
        return sp
    alpha = sp.concentration / sp.p + np.asarray(split_counts, dtype=float)
    return SplitProbVector(s=_dirichlet(alpha, rng), concentration=sp.concentration, mode=sp.mode)
