"""Run configuration: one JSON document with the blocks `dgp`, `propensity`, `prior`, `sampler`, `estimands` and
`study`. Every block and key is optional; unknown keys are rejected.

Example:
```py
import flexcausal as fc

config = fc.RunConfig.load('run.json')
sampler_config = config.sampler_config(sparsity='D', seed=7)
```
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace

from .about import __package__
from .dgp import DgpConfig, REGIMES
from .errors import ConfigError
from .estimands import EstimandRequest, default_subgroups
from .priors import TreePriorParams
from .propensity import DEFAULT_CLIP, METHODS, RESERVED_METHODS
from .sampler import SamplerConfig

# Access the logger created in __init__.py
logger = logging.getLogger(__package__)

SPARSITY_CODES = {'S': 'dirichlet', 'D': 'uniform'}


def _strict(cls, block, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f'Configuration block {block} must be an object')
    known = {item.name for item in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        text = f'Unknown keys {unknown} in configuration block {block}'
        logger.error(text)
        raise ConfigError(text)
    try:
        return cls(**data)
    except TypeError as error:
        raise ConfigError(f'Bad configuration block {block}: {error}') from None


@dataclass
class DgpSettings:
    """Generator settings; `category` (1..5) overrides `confounding` and `heterogeneity`."""
    practices: int = 500
    median_beneficiaries: float = 100.0
    size_sigma: float = 0.5
    category: int = None
    confounding: str = 'weak'
    heterogeneity: str = 'large'
    base_effect: float = 1.0
    eta_override: float = None
    noise_sd: float = 1.0
    practice_re_sd: float = 0.5
    noise_covariates: int = 0
    presence_prob: float = 1.0
    replications: int = 1

    def __post_init__(self):
        if self.category is not None and self.category not in REGIMES:
            raise ConfigError(f'Unknown category {self.category}, expected one of {sorted(REGIMES)}')
        if self.replications < 1:
            raise ConfigError('dgp.replications must be at least 1')

    def dgp_config(self, seed, category=None):
        values = {item.name: getattr(self, item.name) for item in fields(DgpConfig) if hasattr(self, item.name)}
        values['seed'] = seed
        category = category if category is not None else self.category
        if category is not None:
            values['confounding'], values['heterogeneity'] = REGIMES[category]
        return DgpConfig(**values)


@dataclass
class PropensitySettings:
    method: str = 'gbm'
    lambda_grid: list = None
    folds: int = 5
    rounds: int = 500
    shrinkage: float = 0.1
    depth: int = 3
    holdout: float = 0.2
    patience: int = 50
    clip: list = field(default_factory=lambda: list(DEFAULT_CLIP))

    def __post_init__(self):
        if self.method not in METHODS + RESERVED_METHODS:
            raise ConfigError(f'Unknown propensity method {self.method!r}, expected one of {METHODS}')
        if len(self.clip) != 2 or not 0.0 <= self.clip[0] < self.clip[1] <= 1.0:
            raise ConfigError(f'Bad propensity clip {self.clip}')

    def options(self, method):
        """Keyword arguments of `fit_l1_logistic` or `fit_gbm`."""
        if method == 'lasso':
            return {'lambda_grid': self.lambda_grid, 'folds': self.folds, 'clip': tuple(self.clip)}
        return {'rounds': self.rounds, 'shrinkage': self.shrinkage, 'depth': self.depth, 'holdout': self.holdout,
                'patience': self.patience, 'clip': tuple(self.clip)}


@dataclass
class PriorSettings:
    alpha: float = 0.95
    beta: float = 2.0
    leaf_sd_mu: float = None
    leaf_sd_tau: float = None
    nu: float = 3.0
    q: float = 0.9
    concentration: float = 1.0


@dataclass
class SamplerSettings:
    """Chain settings; `sparsity` is `S` (Dirichlet splitting prior) or `D` (uniform)."""
    burn_in: int = 1000
    draws: int = 2000
    thin: int = 1
    mu_trees: int = 200
    tau_trees: int = 50
    sparsity: str = 'S'
    level: str = 'practice'
    max_cuts: int = 100
    save_mu_forest: bool = False
    compress: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.sparsity not in SPARSITY_CODES:
            raise ConfigError(f'Unknown sparsity {self.sparsity!r}, expected S or D')
        if self.level not in ('practice', 'beneficiary'):
            raise ConfigError(f'Unknown analysis level {self.level!r}')


@dataclass
class EstimandSettings:
    """`subgroups` None means every level of every discrete practice covariate."""
    years: list = field(default_factory=lambda: [3, 4])
    subgroups: list = None
    level: float = 0.9

    def request(self, schema):
        subgroups = default_subgroups(schema) if self.subgroups is None else [tuple(item) for item in self.subgroups]
        return EstimandRequest(years=tuple(self.years), subgroups=tuple(subgroups), level=self.level)


@dataclass
class StudySettings:
    methods: list = field(default_factory=lambda: ['LASSO(S)', 'LASSO(D)', 'GBM(S)', 'GBM(D)'])
    categories: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    replications: int = 200
    baseline: str = 'LASSO(S)'
    truth: str = 'sample'
    seed: int = 0

    def __post_init__(self):
        if self.replications < 2:
            raise ConfigError('study.replications must be at least 2')
        if self.truth not in ('sample', 'population'):
            raise ConfigError(f'study.truth must be sample or population, got {self.truth!r}')
        unknown = sorted(set(self.categories) - set(REGIMES))
        if unknown:
            raise ConfigError(f'Unknown categories {unknown}')


BLOCKS = {
    'dgp': DgpSettings,
    'propensity': PropensitySettings,
    'prior': PriorSettings,
    'sampler': SamplerSettings,
    'estimands': EstimandSettings,
    'study': StudySettings,
}


@dataclass
class RunConfig:
    """Complete configuration of a run; defaults reproduce the reference study."""
    dgp: DgpSettings = field(default_factory=DgpSettings)
    propensity: PropensitySettings = field(default_factory=PropensitySettings)
    prior: PriorSettings = field(default_factory=PriorSettings)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    estimands: EstimandSettings = field(default_factory=EstimandSettings)
    study: StudySettings = field(default_factory=StudySettings)

    @classmethod
    def from_dict(cls, data):
        """Builds the configuration from a parsed JSON object.

        Raises:
            ConfigError: Unknown blocks or keys, or invalid values.
        """
        if not isinstance(data, dict):
            raise ConfigError('The configuration must be a JSON object')
        unknown = sorted(set(data) - set(BLOCKS))
        if unknown:
            text = f'Unknown configuration blocks {unknown}, expected some of {sorted(BLOCKS)}'
            logger.error(text)
            raise ConfigError(text)
        return cls(**{name: _strict(block, name, data.get(name)) for name, block in BLOCKS.items()})

    @classmethod
    def load(cls, path):
        """Reads a JSON configuration file; a missing path gives the defaults."""
        if path is None:
            return cls()
        with open(path, encoding='utf-8') as f:
            return cls.from_dict(json.load(f))

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def with_seed(self, seed):
        """Copy whose generator, sampler and study seeds are all `seed`."""
        if seed is None:
            return self
        return replace(self, sampler=replace(self.sampler, seed=seed), study=replace(self.study, seed=seed))

    def sampler_config(self, sparsity=None, seed=None):
        """`SamplerConfig` combining the prior and sampler blocks; `sparsity` (`S` or `D`) overrides the block."""
        mode = SPARSITY_CODES[sparsity or self.sampler.sparsity]
        return SamplerConfig(
            burn_in=self.sampler.burn_in,
            draws=self.sampler.draws,
            thin=self.sampler.thin,
            seed=self.sampler.seed if seed is None else seed,
            mu_trees=self.sampler.mu_trees,
            tau_trees=self.sampler.tau_trees,
            tree_prior=TreePriorParams(self.prior.alpha, self.prior.beta),
            leaf_sd_mu=self.prior.leaf_sd_mu,
            leaf_sd_tau=self.prior.leaf_sd_tau,
            nu=self.prior.nu,
            q=self.prior.q,
            sparsity_mu=mode,
            sparsity_tau=mode,
            concentration=self.prior.concentration,
            max_cuts=self.sampler.max_cuts,
            save_mu_forest=self.sampler.save_mu_forest,
            compress=self.sampler.compress,
        )
