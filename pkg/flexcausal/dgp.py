"""Module providing the synthetic panel generator used to evaluate the estimators.

Practices carry binary covariates X1, X3, X5, three-level categorical covariates X2, X4 (levels a, b, c), continuous
covariates V1..V5 and optional pure-noise covariates N1..Nk. Beneficiaries carry a binary B1 and a continuous B2 whose
distribution shifts with the practice. Treatment is assigned per practice with propensity
`clip(expit(gamma * g(x)), 0.02, 0.98)`; the outcome of beneficiary i of practice j in year t is

    Y = mu(x, t) + Z * 1{t > 2} * tau(x, t) + b_j + e

with a practice random effect `b_j` and Gaussian noise `e`. The time trend of `mu` depends only on X1 and X2, so
parallel trends hold within every (X1, X2) cell. `tau(x, t) = base + eta * h(x, t)`.

The five evaluation categories combine a confounding strength with a heterogeneity size, see `REGIMES`.
"""

import itertools
import json
import logging
import os
from dataclasses import asdict, dataclass, replace

import numpy as np
import pandas as pd
from scipy.special import expit

from .about import __package__
from .errors import ConfigError
from .panel import CovariateSchema, CovariateSpec, PanelDataset, RESERVED_COLUMNS, write_panel

# Access the logger created in __init__.py
logger = logging.getLogger(__package__)

CONFOUNDING = {'none': 0.0, 'weak': 0.4, 'strong': 1.2}
HETEROGENEITY = {'small': 0.25, 'large': 1.0}
REGIMES = {
    1: ('none', 'large'),
    2: ('weak', 'small'),
    3: ('weak', 'large'),
    4: ('strong', 'small'),
    5: ('strong', 'large'),
}
LETTERS = ('a', 'b', 'c')
PROPENSITY_CLIP = (0.02, 0.98)
QUADRATURE_NODES = 40
TRUTH_FILE = 'truth.json'


@dataclass(frozen=True)
class DgpConfig:
    """Settings of the synthetic generator.

    Attributes:
        practices (int): Number of practices.
        median_beneficiaries (float): Median practice size; sizes are log-normal.
        size_sigma (float): Log-scale sd of the practice sizes.
        confounding (str): `none`, `weak` or `strong`.
        heterogeneity (str): `small` or `large`.
        base_effect (float): Mean effect level; `eta` scales with it.
        eta_override (float): Heterogeneity scale replacing the regime value when not None.
        noise_sd (float): Sd of the beneficiary-year noise.
        practice_re_sd (float): Sd of the practice random effect.
        noise_covariates (int): Extra practice covariates N1..Nk unrelated to anything.
        presence_prob (float): Probability that a beneficiary-year record is observed.
        seed (int): Base seed; replication `rep` draws from `default_rng([seed, rep])`.
    """
    practices: int = 500
    median_beneficiaries: float = 100.0
    size_sigma: float = 0.5
    confounding: str = 'weak'
    heterogeneity: str = 'large'
    base_effect: float = 1.0
    eta_override: float = None
    noise_sd: float = 1.0
    practice_re_sd: float = 0.5
    noise_covariates: int = 0
    presence_prob: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.confounding not in CONFOUNDING:
            raise ConfigError(f'Unknown confounding {self.confounding!r}, expected one of {list(CONFOUNDING)}')
        if self.heterogeneity not in HETEROGENEITY:
            raise ConfigError(f'Unknown heterogeneity {self.heterogeneity!r}, expected one of {list(HETEROGENEITY)}')
        if self.practices < 2 or self.median_beneficiaries < 1:
            raise ConfigError('The generator needs at least 2 practices and a median size of at least 1')
        if not 0.0 < self.presence_prob <= 1.0:
            raise ConfigError(f'presence_prob must lie in (0, 1], got {self.presence_prob}')

    @classmethod
    def for_category(cls, category, **overrides):
        """Settings of evaluation category 1..5."""
        if category not in REGIMES:
            raise ConfigError(f'Unknown category {category}, expected one of {sorted(REGIMES)}')
        confounding, heterogeneity = REGIMES[category]
        return cls(confounding=confounding, heterogeneity=heterogeneity, **overrides)

    @property
    def gamma(self):
        return CONFOUNDING[self.confounding]

    @property
    def eta(self):
        if self.eta_override is not None:
            return self.eta_override
        return HETEROGENEITY[self.heterogeneity] * self.base_effect


def schema_for(config):
    """Covariate schema of the generated panels."""
    entries = []
    for index in range(1, 6):
        if index in (2, 4):
            entries.append(CovariateSpec(f'X{index}', 'categorical', LETTERS))
        else:
            entries.append(CovariateSpec(f'X{index}', 'binary'))
    entries += [CovariateSpec(f'V{index}', 'continuous') for index in range(1, 6)]
    entries += [CovariateSpec(f'N{index}', 'continuous') for index in range(1, config.noise_covariates + 1)]
    entries += [CovariateSpec('B1', 'binary', scope='beneficiary'),
                CovariateSpec('B2', 'continuous', scope='beneficiary')]
    return CovariateSchema(entries)


def _signed(flag):
    return 2.0 * np.asarray(flag, dtype=float) - 1.0


def _letter_contrast(level):
    """+1 for level c, -1 for level a, 0 for level b; `level` holds indices 0..2."""
    return np.asarray(level, dtype=float) - 1.0


def confounding_score(x1, x2, x3, v1, v2):
    """Confounding function g; bounded in (-2.5, 2.5)."""
    u = 0.6 * v1 + 0.5 * _signed(x1) + 0.4 * _letter_contrast(x2) + 0.3 * v2 * _signed(x3)
    return 2.5 * np.tanh(u)


def propensity(config, x1, x2, x3, v1, v2):
    return np.clip(expit(config.gamma * confounding_score(x1, x2, x3, v1, v2)), *PROPENSITY_CLIP)


def prognostic(x1, x2, x3, x4, v1, v2, v3, b1, b2, year):
    """mu(x, t): level plus a trend that depends on X1 and X2 only."""
    level = (1.0 * v1 + 0.8 * _signed(x1) + 0.5 * (np.asarray(x2) == 1) + 0.4 * v2 * _signed(x3)
             + 0.3 * _letter_contrast(x4) + 0.5 * np.sin(v3) + 0.3 * b1 + 0.3 * b2)
    trend = 0.5 + 0.3 * _signed(x1) + 0.2 * (np.asarray(x2) == 2)
    return level + (np.asarray(year) - 1.0) * trend


def modifier(x1, x2, v1, year):
    """h(x, t): effect modification by X1, X2, V1 and the post year."""
    return (0.6 * _signed(x1) + 0.4 * _letter_contrast(x2) + 0.5 * np.tanh(v1)
            + 0.2 * np.where(np.asarray(year) == 4, 1.0, -1.0))


def effect(config, x1, x2, v1, year):
    """tau(x, t) for post years."""
    return config.base_effect + config.eta * modifier(x1, x2, v1, year)


def draw_practices(config, n, rng):
    """Practice covariates, propensity and treatment of `n` practices.

    Returns:
        (DataFrame): Columns X1..X5 (X2, X4 as level indices), V1..V5, N1..Nk, `e` and `treated`.
    """
    practices = pd.DataFrame({
        'X1': rng.integers(0, 2, n),
        'X2': rng.integers(0, 3, n),
        'X3': rng.integers(0, 2, n),
        'X4': rng.integers(0, 3, n),
        'X5': rng.integers(0, 2, n),
    })
    for index in range(1, 6):
        practices[f'V{index}'] = rng.standard_normal(n)
    for index in range(1, config.noise_covariates + 1):
        practices[f'N{index}'] = rng.standard_normal(n)
    e = propensity(config, practices['X1'], practices['X2'], practices['X3'], practices['V1'], practices['V2'])
    practices['e'] = e
    practices['treated'] = (rng.random(n) < e).astype(np.int64)
    return practices


def simulate_potential_outcomes(config, rep):
    """Generates one replication with both potential outcomes of every record.

    Returns:
        (tuple): `(frame, schema)`; the frame holds the panel columns plus `y0`, `y1`, `tau` (effect for post years,
        0 before) and `e` (true propensity). Categorical covariates are level labels.
    """
    rng = np.random.default_rng([config.seed, rep])
    practices = draw_practices(config, config.practices, rng)
    sizes = np.maximum(1, np.rint(rng.lognormal(np.log(config.median_beneficiaries), config.size_sigma,
                                                 config.practices))).astype(np.int64)
    random_effect = rng.normal(0.0, config.practice_re_sd, config.practices)

    owner = np.repeat(np.arange(config.practices), sizes)
    n_beneficiaries = owner.size
    b1 = (rng.random(n_beneficiaries) < 0.3 + 0.4 * expit(practices['V4'].to_numpy()[owner])).astype(np.int64)
    b2 = 0.5 * practices['V5'].to_numpy()[owner] + rng.standard_normal(n_beneficiaries)

    records = pd.DataFrame({
        'beneficiary': np.repeat(np.arange(n_beneficiaries), 4),
        'year': np.tile(np.arange(1, 5), n_beneficiaries),
    })
    records['practice'] = owner[records['beneficiary'].to_numpy()]
    if config.presence_prob < 1.0:
        records = records[rng.random(len(records)) < config.presence_prob].reset_index(drop=True)

    j = records['practice'].to_numpy()
    i = records['beneficiary'].to_numpy()
    year = records['year'].to_numpy()
    x = {name: practices[name].to_numpy()[j] for name in practices.columns}
    mu = prognostic(x['X1'], x['X2'], x['X3'], x['X4'], x['V1'], x['V2'], x['V3'], b1[i], b2[i], year)
    tau = np.where(year > 2, effect(config, x['X1'], x['X2'], x['V1'], year), 0.0)
    y0 = mu + random_effect[j] + rng.normal(0.0, config.noise_sd, len(records))
    y1 = y0 + tau

    frame = pd.DataFrame({
        'beneficiary_id': [f'b{value:07d}' for value in i],
        'practice_id': [f'p{value:04d}' for value in j],
        'year': year,
        'outcome': np.where(x['treated'] == 1, y1, y0),
        'treated': x['treated'],
    })
    for name in ('X1', 'X3', 'X5'):
        frame[name] = x[name]
    for name in ('X2', 'X4'):
        frame[name] = np.asarray(LETTERS)[x[name]]
    for name in practices.columns:
        if name[0] in 'VN':
            frame[name] = x[name]
    frame['B1'] = b1[i]
    frame['B2'] = b2[i]
    frame['y0'], frame['y1'], frame['tau'], frame['e'] = y0, y1, tau, x['e']
    return frame, schema_for(config)


@dataclass
class TruthRecord:
    """True estimands of one replication.

    Sample truths average τ over the treated beneficiary records actually generated; population truths integrate τ
    over the covariate distribution weighted by the propensity. Keys are `ATT` and `<covariate>=<level>`.

    Attributes:
        rep (int): Replication index.
        n_rows (int): Records in the emitted panel.
        sample (dict): Years key (`'3'`, `'4'`, `'3,4'`) -> estimand -> value.
        population (dict): Same layout, population values.
    """
    rep: int
    n_rows: int
    sample: dict
    population: dict

    def target(self, estimand, kind='sample', years=(3, 4)):
        table = self.sample if kind == 'sample' else self.population
        return table[years_key(years)][estimand]

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, encoding='utf-8') as f:
            return cls(**json.load(f))


def years_key(years):
    return ','.join(str(year) for year in sorted(years))


def truth_subgroups(config):
    """Subgroups the truths are reported for: every level of X1..X5."""
    schema = schema_for(config)
    filters = []
    for spec in schema.by_scope('practice'):
        if spec.kind == 'binary':
            filters += [(spec.name, '0'), (spec.name, '1')]
        elif spec.kind == 'categorical':
            filters += [(spec.name, level) for level in spec.levels]
    return filters


def _sample_truth(frame, config, years):
    post = frame[(frame['treated'] == 1) & frame['year'].isin(years)]
    if post.empty:
        return {}
    modifiers = modifier(post['X1'].to_numpy(), pd.Categorical(post['X2'], LETTERS).codes,
                         post['V1'].to_numpy(), post['year'].to_numpy())
    truths = {'ATT': config.base_effect + config.eta * float(np.mean(modifiers))}
    for name, value in truth_subgroups(config):
        mask = (post[name].astype(str) == value).to_numpy()
        if mask.any():
            truths[f'{name}={value}'] = config.base_effect + config.eta * float(np.mean(modifiers[mask]))
    return truths


def population_truth(config, years=(3, 4)):
    """ATT and subgroup ATTs over the population, by exact enumeration of the discrete covariates and Gauss-Hermite
    quadrature over V1 and V2.

    Beneficiaries, practice sizes and presence are independent of the covariates driving τ and the propensity, so
    the beneficiary-weighted ATT equals the propensity-weighted covariate average, pooled evenly over `years`.
    """
    nodes, weights = np.polynomial.hermite_e.hermegauss(QUADRATURE_NODES)
    weights = weights / np.sqrt(2.0 * np.pi)
    v1, v2 = np.meshgrid(nodes, nodes, indexing='ij')
    w12 = np.outer(weights, weights)

    cells = []
    for x1, x2, x3, x4, x5 in itertools.product((0, 1), (0, 1, 2), (0, 1), (0, 1, 2), (0, 1)):
        mass = 0.5 * (1 / 3) * 0.5 * (1 / 3) * 0.5 * w12
        e = propensity(config, x1, x2, x3, v1, v2)
        h = np.mean([modifier(x1, x2, v1, year) for year in years], axis=0)
        cells.append(({'X1': x1, 'X2': x2, 'X3': x3, 'X4': x4, 'X5': x5}, np.sum(mass * e), np.sum(mass * e * h)))

    def average(selected):
        treated_mass = sum(cell[1] for cell in selected)
        return config.base_effect + config.eta * (sum(cell[2] for cell in selected) / treated_mass)

    truths = {'ATT': average(cells)}
    for name, value in truth_subgroups(config):
        code = LETTERS.index(value) if name in ('X2', 'X4') else int(value)
        truths[f'{name}={value}'] = average([cell for cell in cells if cell[0][name] == code])
    return truths


def generate(config, rep):
    """One replication: the observed panel and its truth record.

    The same `(config, rep)` always yields the same panel.

    Example:
    ```py
    import flexcausal as fc

    data, truth = fc.generate(fc.DgpConfig.for_category(3, practices=200), rep=0)
    truth.target('ATT')
    ```
    """
    frame, schema = simulate_potential_outcomes(config, rep)
    year_sets = ((3,), (4,), (3, 4))
    truth = TruthRecord(
        rep=rep,
        n_rows=len(frame),
        sample={years_key(years): _sample_truth(frame, config, years) for years in year_sets},
        population={years_key(years): population_truth(config, years) for years in year_sets},
    )
    dataset = PanelDataset.from_frame(frame[list(RESERVED_COLUMNS) + schema.names], schema)
    logger.debug(f'Generated replication {rep}: {dataset.n_rows} records, '
                 f'{int(frame.groupby("practice_id")["treated"].first().sum())} treated practices')
    return dataset, truth


def regime_suite(category, reps, seed=0, base=None):
    """Yields `(dataset, truth)` for replications `0..reps-1` of an evaluation category."""
    confounding, heterogeneity = REGIMES[category] if category in REGIMES else (None, None)
    if confounding is None:
        raise ConfigError(f'Unknown category {category}, expected one of {sorted(REGIMES)}')
    config = replace(base or DgpConfig(), confounding=confounding, heterogeneity=heterogeneity, seed=seed)
    for rep in range(reps):
        yield generate(config, rep)


def write_replication(dataset, truth, out_dir):
    """Writes `panel.csv`, `panel.schema.json` and `truth.json` into `out_dir`."""
    os.makedirs(out_dir, exist_ok=True)
    write_panel(dataset, os.path.join(out_dir, 'panel.csv'))
    dataset.schema.save(os.path.join(out_dir, 'panel.schema.json'))
    truth.save(os.path.join(out_dir, TRUTH_FILE))
