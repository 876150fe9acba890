"""Module providing the treatment-effect estimands: overall and subgroup ATTs from the posterior archive, and the
difference-in-differences cell estimator used as a frequentist cross-check.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .about import __package__
from .errors import ConfigError, EmptyCell, EmptySubgroup, NoTreatedRows, UnknownLevel
from .reducers import GroupMeans, StreamingQuantiles
from .sampler import predict_tau

# Access the logger created in __init__.py
logger = logging.getLogger(__package__)

POST_YEARS = (3, 4)
ATT_LABEL = 'ATT'


@dataclass(frozen=True)
class EstimandRequest:
    """What to report from a posterior archive.

    Attributes:
        years (tuple): Post-period years pooled into every estimand, a nonempty subset of (3, 4).
        subgroups (tuple): `(covariate, level)` filters; empty for the overall ATT only.
        level (float): Credible level of the equal-tailed intervals.
    """
    years: tuple = POST_YEARS
    subgroups: tuple = ()
    level: float = 0.9

    def __post_init__(self):
        years = tuple(int(year) for year in self.years)
        if not years or not set(years) <= set(POST_YEARS):
            raise ConfigError(f'Estimand years must be a nonempty subset of {POST_YEARS}, got {self.years}')
        if not 0.0 < self.level < 1.0:
            raise ConfigError(f'Credible level must lie in (0, 1), got {self.level}')
        object.__setattr__(self, 'years', years)
        object.__setattr__(self, 'subgroups', tuple((str(name), str(value)) for name, value in self.subgroups))


@dataclass(frozen=True)
class EstimateSummary:
    """Posterior mean and equal-tailed credible interval of one estimand."""
    point: float
    lower: float
    upper: float
    draws_used: int

    @property
    def length(self):
        return self.upper - self.lower

    def covers(self, value):
        return self.lower <= value <= self.upper

    def to_dict(self, estimand=None, years=None):
        item = {} if estimand is None else {'estimand': estimand}
        if years is not None:
            item['years'] = list(years)
        item.update(point=self.point, lower=self.lower, upper=self.upper, draws=self.draws_used)
        return item


def summarize_draws(draws, level=0.9):
    """Mean and `(1 - level) / 2`, `(1 + level) / 2` quantiles of a vector of draws.

    Example:
    ```py
    import flexcausal as fc

    fc.summarize_draws(np.array([1.0, 2.0, 3.0]), level=0.9)
    # EstimateSummary(point=2.0, lower=1.1, upper=2.9, draws_used=3)
    ```
    """
    draws = np.asarray(draws, dtype=float)
    if draws.size == 0:
        raise ValueError('No draw to summarize')
    tail = (1.0 - level) / 2.0
    lower, upper = np.quantile(draws, [tail, 1.0 - tail])
    return EstimateSummary(point=float(np.mean(draws)), lower=float(lower), upper=float(upper),
                           draws_used=int(draws.size))


def default_subgroups(schema):
    """Every level of every binary or categorical practice covariate, in schema order."""
    filters = []
    for spec in schema.by_scope('practice'):
        if spec.kind == 'binary':
            filters += [(spec.name, '0'), (spec.name, '1')]
        elif spec.kind == 'categorical':
            filters += [(spec.name, level) for level in spec.levels]
    return filters


def subgroup_label(name, value):
    return f'{name}={value}'


def _post_rows(design, years):
    """Rows of treated practices in the requested post-period years."""
    if design.keys is None:
        return np.ones(design.n, dtype=bool)
    keys = design.keys
    return (keys['treated'].to_numpy() == 1) & np.isin(keys['year'].to_numpy(), years)


def subgroup_mask(design, name, value):
    """Boolean mask of the design rows whose covariate `name` equals `value` (a level label or a 0/1 string)."""
    try:
        column = design.column(name)
    except KeyError:
        text = f'Unknown subgroup covariate {name}'
        logger.error(text)
        raise UnknownLevel(text) from None
    if column.is_categorical:
        if str(value) not in column.levels:
            text = f'Unknown level {value!r} of {name}, expected one of {list(column.levels)}'
            logger.error(text)
            raise UnknownLevel(text)
        return column.values == column.levels.index(str(value))
    try:
        return column.values == float(value)
    except ValueError:
        text = f'Level {value!r} of {name} is not numeric'
        logger.error(text)
        raise UnknownLevel(text) from None


def _estimate_groups(archive, tau_design, groups, weights, years, level, workers):
    rows = _post_rows(tau_design, years)
    if not rows.any():
        text = f'No treated row in years {list(years)}'
        logger.error(text)
        raise NoTreatedRows(text)
    design = tau_design.subset(rows)
    weights = design.weights() if weights is None else np.asarray(weights, dtype=float)[rows]
    masks = {}
    for name, mask in groups.items():
        mask = np.asarray(mask, dtype=bool)[rows]
        if not mask.any():
            text = f'Subgroup {name} holds no treated row in years {list(years)}'
            logger.error(text)
            raise EmptySubgroup(text)
        masks[name] = mask
    table = predict_tau(archive, design, GroupMeans(masks, weights=weights), workers=workers)
    return {name: summarize_draws(table[:, index], level) for index, name in enumerate(masks)}


def att(archive, tau_design, weights=None, years=POST_YEARS, level=0.9, workers=1):
    """Average treatment effect on the treated.

    Per draw, τ is averaged over the rows of treated practices in `years` with the design row weights (member counts
    at practice level, so the average is over beneficiaries either way).

    Args:
        archive (PosteriorArchive): Fitted archive.
        tau_design (DesignMatrix): τ design of the fitted panel (all rows, keys included).
        weights (array, optional): Row weights aligned with `tau_design`, design weights when None.
        years (tuple): Post-period years to pool.
        level (float): Credible level.
        workers (int): Parallel workers of `predict_tau`.

    Returns:
        (EstimateSummary): Posterior mean and interval.

    Raises:
        NoTreatedRows: If no row is treated in `years`.
    """
    groups = {ATT_LABEL: np.ones(tau_design.n, dtype=bool)}
    return _estimate_groups(archive, tau_design, groups, weights, years, level, workers)[ATT_LABEL]


def subgroup_atts(archive, tau_design, filters, weights=None, years=POST_YEARS, level=0.9, workers=1):
    """ATT restricted to each `(covariate, level)` filter, all filters reduced in one pass over the archive.

    Returns:
        (dict): `'<covariate>=<level>'` -> `EstimateSummary`, in filter order.

    Raises:
        UnknownLevel: A filter names an unknown covariate or level.
        EmptySubgroup: A filter selects no treated row.
    """
    groups = {subgroup_label(name, value): subgroup_mask(tau_design, name, value) for name, value in filters}
    return _estimate_groups(archive, tau_design, groups, weights, years, level, workers)


def estimate(archive, tau_design, request, workers=1):
    """Overall ATT plus the requested subgroup ATTs, in one pass over the archive.

    Returns:
        (dict): Estimand label -> `EstimateSummary`; the overall ATT is under `'ATT'`.
    """
    groups = {ATT_LABEL: np.ones(tau_design.n, dtype=bool)}
    groups.update({subgroup_label(name, value): subgroup_mask(tau_design, name, value)
                   for name, value in request.subgroups})
    return _estimate_groups(archive, tau_design, groups, None, request.years, request.level, workers)


def row_effects(archive, tau_design, years=POST_YEARS, probs=(0.05, 0.5, 0.95), capacity=512, workers=1):
    """Posterior mean and quantiles of τ for every treated post-period row.

    Returns:
        (dict): `rows` (positions in `tau_design`), `mean` and `quantiles` (rows, len(probs)).
    """
    rows = np.flatnonzero(_post_rows(tau_design, years))
    if rows.size == 0:
        raise NoTreatedRows(f'No treated row in years {list(years)}')
    result = predict_tau(archive, tau_design.subset(rows), StreamingQuantiles(probs, capacity), workers=workers)
    result['rows'] = rows
    return result


def _cell(data, x):
    frame = data.frame
    mask = np.ones(len(frame), dtype=bool)
    for name, value in x.items():
        try:
            spec = data.schema[name]
        except KeyError:
            raise UnknownLevel(f'Unknown cell covariate {name}') from None
        if spec.kind == 'continuous':
            raise UnknownLevel(f'Cell covariate {name} is continuous, cells need discrete covariates')
        if spec.kind == 'categorical':
            mask &= (frame[name].astype(str) == str(value)).to_numpy()
        else:
            mask &= (frame[name].to_numpy() == int(value))
    return frame[mask]


def _check_years(s, t):
    if s not in (1, 2) or t not in POST_YEARS:
        raise ConfigError(f'Cell contrast needs a pre year in (1, 2) and a post year in {POST_YEARS}, got {s}, {t}')


def did_cell_estimator(data, x, s, t):
    """Difference-in-differences of cell means: `(Y1_t - Y1_s) - (Y0_t - Y0_s)` within covariate cell `x`.

    Args:
        data (PanelDataset): Validated panel.
        x (dict): Discrete covariate name -> level defining the cell.
        s (int): Pre year, 1 or 2.
        t (int): Post year, 3 or 4.

    Returns:
        (float): Estimate of the effect on the treated in year `t` within the cell.

    Raises:
        EmptyCell: If one of the four (treatment, year) groups of the cell is empty.
    """
    _check_years(s, t)
    cell = _cell(data, x)
    means = {}
    for z in (0, 1):
        for year in (s, t):
            values = cell.loc[(cell['treated'] == z) & (cell['year'] == year), 'outcome']
            if values.empty:
                text = f'Cell {x} has no record with treated={z} in year {year}'
                logger.error(text)
                raise EmptyCell(text)
            means[z, year] = float(values.mean())
    return (means[1, t] - means[1, s]) - (means[0, t] - means[0, s])


def did_cell_standard_error(data, x, s, t):
    """Standard error of the cell contrast from the beneficiaries observed in both years.

    Uses the per-beneficiary difference `Y_t - Y_s` and returns `sqrt(var_1 / n_1 + var_0 / n_0)`.

    Raises:
        EmptyCell: If an arm has fewer than two beneficiaries observed in both years.
    """
    _check_years(s, t)
    cell = _cell(data, x)
    wide = cell[cell['year'].isin((s, t))].pivot_table(
        index=['beneficiary_id', 'treated'], columns='year', values='outcome', aggfunc='first', observed=True,
    ).dropna()
    if s not in wide.columns or t not in wide.columns:
        raise EmptyCell(f'Cell {x} has no beneficiary observed in both years {s} and {t}')
    differences = (wide[t] - wide[s]).rename('difference').reset_index()
    variance = 0.0
    for z in (0, 1):
        arm = differences.loc[differences['treated'] == z, 'difference']
        if arm.size < 2:
            text = f'Cell {x} has {arm.size} beneficiaries with treated={z} observed in years {s} and {t}'
            logger.error(text)
            raise EmptyCell(text)
        variance += float(arm.var(ddof=1)) / arm.size
    return float(np.sqrt(variance))
