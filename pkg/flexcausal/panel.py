"""Module providing the longitudinal panel data model and the design matrices fed to the two forests.

A panel is a table of beneficiary-year records. Each record carries the practice it belongs to, the practice treatment
flag, the outcome and a set of covariates described by a `CovariateSchema`. The forests never see the panel directly:
`build_design` turns it into a `DesignMatrix` at practice or beneficiary granularity.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .about import __package__
from .errors import (
    MalformedRow, DuplicateObservation, InconsistentTreatment, MissingPropensity, UnknownLevel, DimensionMismatch,
)

# Access the logger created in __init__.py
logger = logging.getLogger(__package__)

RESERVED_COLUMNS = ('beneficiary_id', 'practice_id', 'year', 'outcome', 'treated')
KINDS = ('continuous', 'binary', 'categorical')
SCOPES = ('practice', 'beneficiary')
TARGETS = ('mu', 'tau')
LEVELS = ('practice', 'beneficiary')
YEARS = (1, 2, 3, 4)
PRE_YEARS = (1, 2)
DEFAULT_MAX_CUTS = 100


@dataclass(frozen=True)
class CovariateSpec:
    """One covariate of the schema.

    Attributes:
        name (str): Column name in the panel file.
        kind (str): `continuous`, `binary` or `categorical`.
        levels (tuple): Ordered level labels, categorical covariates only.
        scope (str): `practice` when the value is a practice attribute, `beneficiary` otherwise.
    """
    name: str
    kind: str
    levels: tuple = ()
    scope: str = 'practice'


class CovariateSchema:
    """Ordered list of covariate specifications.

    Args:
        entries (list): `CovariateSpec` objects or dictionaries `{name, kind, levels?, scope?}`.

    Raises:
        MalformedRow: If names repeat, a kind or scope is unknown, or a categorical covariate has less than 2 levels.
    """

    def __init__(self, entries):
        specs = []
        for entry in entries:
            if isinstance(entry, dict):
                unknown = set(entry) - {'name', 'kind', 'levels', 'scope'}
                if unknown:
                    _fail(MalformedRow, f'Unknown schema keys {sorted(unknown)}')
                entry = CovariateSpec(
                    name=str(entry['name']),
                    kind=entry['kind'],
                    levels=tuple(str(level) for level in entry.get('levels', ())),
                    scope=entry.get('scope', 'practice'),
                )
            specs.append(entry)
        names = [spec.name for spec in specs]
        if len(set(names)) != len(names):
            _fail(MalformedRow, f'Covariate names must be unique, got {names}')
        for spec in specs:
            if spec.name in RESERVED_COLUMNS:
                _fail(MalformedRow, f'Covariate name {spec.name} is reserved')
            if spec.kind not in KINDS:
                _fail(MalformedRow, f'Unknown covariate kind {spec.kind} for {spec.name}')
            if spec.scope not in SCOPES:
                _fail(MalformedRow, f'Unknown covariate scope {spec.scope} for {spec.name}')
            if spec.kind == 'categorical' and len(set(spec.levels)) < 2:
                _fail(MalformedRow, f'Categorical covariate {spec.name} needs at least 2 distinct levels')
        self.entries = tuple(specs)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, name):
        for spec in self.entries:
            if spec.name == name:
                return spec
        raise KeyError(name)

    @property
    def names(self):
        return [spec.name for spec in self.entries]

    def by_scope(self, scope):
        return [spec for spec in self.entries if spec.scope == scope]

    def to_list(self):
        items = []
        for spec in self.entries:
            item = {'name': spec.name, 'kind': spec.kind, 'scope': spec.scope}
            if spec.kind == 'categorical':
                item['levels'] = list(spec.levels)
            items.append(item)
        return items

    @classmethod
    def load(cls, path):
        """Reads the JSON sidecar, a list of `{name, kind, levels?, scope?}`."""
        with open(path, encoding='utf-8') as f:
            return cls(json.load(f))

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_list(), f, indent=2)


@dataclass
class PanelDataset:
    """Validated beneficiary-year records.

    Use `PanelDataset.from_frame` (or `load_panel`) to build one; the constructor does not validate.

    Attributes:
        frame (DataFrame): Reserved columns plus one column per covariate, sorted by practice, beneficiary and year.
        schema (CovariateSchema): Covariate description.
    """
    frame: pd.DataFrame
    schema: CovariateSchema

    @property
    def n_rows(self):
        return len(self.frame)

    @property
    def practices(self):
        return np.unique(self.frame['practice_id'].to_numpy())

    @classmethod
    def from_frame(cls, frame, schema):
        """Validates a raw table against the schema and returns the dataset.

        Raises:
            MalformedRow: Header mismatch, missing values, bad types or unknown levels.
            DuplicateObservation: A `(beneficiary_id, year)` pair appears more than once.
            InconsistentTreatment: The treatment flag varies within a practice.
        """
        expected = set(RESERVED_COLUMNS) | set(schema.names)
        header = set(frame.columns)
        if header != expected:
            missing = sorted(expected - header)
            extra = sorted(header - expected)
            _fail(MalformedRow, f'Header does not match schema, missing {missing}, unexpected {extra}')

        frame = frame.copy()
        for column in frame.columns:
            missing_rows = np.flatnonzero(frame[column].isna().to_numpy())
            if missing_rows.size:
                _fail(MalformedRow, f'Missing value in column {column} at row {missing_rows[0] + 1}')

        frame['beneficiary_id'] = frame['beneficiary_id'].astype(str)
        frame['practice_id'] = frame['practice_id'].astype(str)
        frame['year'] = _integer_column(frame, 'year', allowed=YEARS)
        frame['treated'] = _integer_column(frame, 'treated', allowed=(0, 1))
        frame['outcome'] = _real_column(frame, 'outcome')
        for spec in schema:
            if spec.kind == 'continuous':
                frame[spec.name] = _real_column(frame, spec.name)
            elif spec.kind == 'binary':
                frame[spec.name] = _integer_column(frame, spec.name, allowed=(0, 1))
            else:
                labels = frame[spec.name].astype(str)
                bad = np.flatnonzero(~labels.isin(spec.levels).to_numpy())
                if bad.size:
                    _fail(MalformedRow, f'Unknown level {labels.iloc[bad[0]]!r} of {spec.name} at row {bad[0] + 1}')
                frame[spec.name] = pd.Categorical(labels, categories=list(spec.levels))

        duplicated = frame.duplicated(['beneficiary_id', 'year'])
        if duplicated.any():
            row = frame[duplicated].iloc[0]
            _fail(DuplicateObservation,
                  f'Beneficiary {row["beneficiary_id"]} observed more than once in year {row["year"]}')

        by_practice = frame.groupby('practice_id', sort=False)
        varying = by_practice['treated'].nunique()
        if (varying > 1).any():
            _fail(InconsistentTreatment,
                  f'Treatment flag varies within practice {varying[varying > 1].index[0]}')
        for spec in schema.by_scope('practice'):
            varying = by_practice[spec.name].nunique()
            if (varying > 1).any():
                _fail(MalformedRow,
                      f'Practice covariate {spec.name} varies within practice {varying[varying > 1].index[0]}')

        frame = frame.sort_values(['practice_id', 'beneficiary_id', 'year'], kind='mergesort')
        frame = frame[list(RESERVED_COLUMNS) + schema.names].reset_index(drop=True)
        return cls(frame=frame, schema=schema)


@dataclass
class DesignColumn:
    """One column of a design matrix.

    Continuous columns hold reals and a cutpoint grid; categorical columns hold level indices in `[0, len(levels))`.
    """
    name: str
    kind: str
    values: np.ndarray
    levels: tuple = ()
    cutpoints: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def is_categorical(self):
        return self.kind == 'categorical'

    @property
    def n_levels(self):
        return len(self.levels)

    def splittable(self):
        if self.is_categorical:
            return self.n_levels >= 2
        return self.cutpoints.size > 0


@dataclass
class DesignMatrix:
    """Encoded covariates of one forest.

    Attributes:
        columns (list): `DesignColumn` objects, all of length `n`.
        row_weights (ndarray): Positive weights per row, or None for unit weights.
        keys (DataFrame): Row identification (`practice_id`, `year`, `treated`, and `beneficiary_id` at beneficiary
            level), aligned with the columns.
    """
    columns: list
    row_weights: np.ndarray = None
    keys: pd.DataFrame = None

    @property
    def n(self):
        return len(self.columns[0].values) if self.columns else 0

    @property
    def p(self):
        return len(self.columns)

    @property
    def names(self):
        return [column.name for column in self.columns]

    @property
    def cutpoint_grids(self):
        return {column.name: column.cutpoints for column in self.columns if not column.is_categorical}

    def column(self, name):
        for column in self.columns:
            if column.name == name:
                return column
        raise KeyError(name)

    def weights(self):
        if self.row_weights is None:
            return np.ones(self.n)
        return self.row_weights

    def zmask(self):
        """1 for rows of treated practices in years 3 and 4, 0 otherwise."""
        if self.keys is None:
            raise DimensionMismatch('Design matrix carries no row keys, the treatment mask is unknown')
        return ((self.keys['treated'].to_numpy() == 1) & (self.keys['year'].to_numpy() > 2)).astype(np.int8)

    def subset(self, rows, regrid=False, max_cuts=DEFAULT_MAX_CUTS):
        """New design restricted to `rows` (boolean mask or indices).

        With `regrid=True` the cutpoint grids are recomputed on the retained rows.
        """
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        columns = []
        for column in self.columns:
            values = column.values[rows]
            cutpoints = column.cutpoints
            if regrid and not column.is_categorical:
                cutpoints = cutpoint_grid(values, max_cuts) if values.size else np.empty(0)
            columns.append(DesignColumn(column.name, column.kind, values, column.levels, cutpoints))
        weights = None if self.row_weights is None else self.row_weights[rows]
        keys = None if self.keys is None else self.keys.iloc[rows].reset_index(drop=True)
        return DesignMatrix(columns=columns, row_weights=weights, keys=keys)

    def numeric_matrix(self, one_hot=True):
        """Dense float matrix for linear models; categorical columns are expanded into one indicator per level.

        Returns:
            (tuple): `(matrix, feature_names)`.
        """
        blocks = []
        names = []
        for column in self.columns:
            if column.is_categorical and one_hot:
                indicators = np.zeros((self.n, column.n_levels))
                indicators[np.arange(self.n), column.values] = 1.0
                blocks.append(indicators)
                names.extend(f'{column.name}[{level}]' for level in column.levels)
            else:
                blocks.append(column.values.astype(float)[:, None])
                names.append(column.name)
        matrix = np.hstack(blocks) if blocks else np.empty((self.n, 0))
        return matrix, names

    def check_names(self, names):
        if list(names) != self.names:
            text = f'Design columns {self.names} do not match the expected columns {list(names)}'
            logger.error(text)
            raise DimensionMismatch(text)


def _fail(error_class, text):
    logger.error(text)
    raise error_class(text)


def _integer_column(frame, name, allowed):
    values = pd.to_numeric(frame[name], errors='coerce')
    bad = values.isna() | ~values.isin([float(value) for value in allowed])
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        _fail(MalformedRow, f'Bad value {frame[name].iloc[row]!r} in column {name} at row {row + 1}')
    return values.astype(np.int64)


def _real_column(frame, name):
    values = pd.to_numeric(frame[name], errors='coerce')
    bad = values.isna() | ~np.isfinite(values)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        _fail(MalformedRow, f'Bad value {frame[name].iloc[row]!r} in column {name} at row {row + 1}')
    return values.astype(float)


def load_panel(path, schema):
    """Loads a panel CSV file and validates it against the schema.

    Args:
        path (str): UTF-8 CSV file with a header row; reserved columns `beneficiary_id, practice_id, year, outcome,
            treated` plus one column per schema entry.
        schema (CovariateSchema): Covariate description, e.g. from `CovariateSchema.load()`.

    Returns:
        (PanelDataset): Validated dataset.

    Raises:
        OSError: If the file can not be read.
        MalformedRow: Header mismatch, bad type or unknown level.
        DuplicateObservation: Repeated `(beneficiary_id, year)`.
        InconsistentTreatment: Treatment flag varying within a practice.

    Example:
    ```py
    import flexcausal as fc

    schema = fc.CovariateSchema.load('panel.schema.json')
    data = fc.load_panel('panel.csv', schema)
    ```
    """
    dtypes = {'beneficiary_id': str, 'practice_id': str}
    dtypes.update({spec.name: str for spec in schema if spec.kind == 'categorical'})
    try:
        frame = pd.read_csv(path, dtype=dtypes, encoding='utf-8')
    except OSError as error:
        logger.error(f'Not possible to read panel file {path}: {error}')
        raise
    dataset = PanelDataset.from_frame(frame, schema)
    logger.info(f'Loaded panel {path}: {dataset.n_rows} rows, {len(dataset.practices)} practices')
    return dataset


def write_panel(dataset, path):
    """Writes the dataset in the CSV layout read by `load_panel`."""
    dataset.frame.to_csv(path, index=False, encoding='utf-8')


def cutpoint_grid(column, max_cuts=DEFAULT_MAX_CUTS):
    """Candidate split points of a continuous column.

    Args:
        column (array): Observed values, nonempty.
        max_cuts (int): Largest grid size, at least 1.

    Returns:
        (ndarray): Strictly increasing cutpoints. Midpoints between consecutive distinct values when there are at most
        `max_cuts` distinct values, otherwise `max_cuts` empirical quantiles with duplicates removed. A constant column
        yields an empty grid.
    """
    values = np.asarray(column, dtype=float)
    if max_cuts < 1 or values.size == 0:
        raise ValueError('cutpoint_grid needs max_cuts >= 1 and a nonempty column')
    distinct = np.unique(values)
    if distinct.size <= 1:
        return np.empty(0)
    if distinct.size <= max_cuts:
        return (distinct[:-1] + distinct[1:]) / 2.0
    probs = np.arange(1, max_cuts + 1) / (max_cuts + 1.0)
    cuts = np.unique(np.quantile(values, probs))
    return cuts[(cuts >= distinct[0]) & (cuts < distinct[-1])]


def _beneficiary_encodings(frame, schema):
    """Numeric encodings of the beneficiary covariates: the value itself, or one share column per level."""
    encoded = {}
    for spec in schema.by_scope('beneficiary'):
        if spec.kind == 'categorical':
            for level in spec.levels:
                encoded[f'{spec.name}[{level}]'] = (frame[spec.name] == level).astype(float).to_numpy()
        else:
            encoded[spec.name] = frame[spec.name].astype(float).to_numpy()
    return pd.DataFrame(encoded, index=frame.index)


def composition_averages(data, years):
    """Per practice, the average of every beneficiary covariate encoding in each requested year.

    Returns:
        (DataFrame): Indexed by `practice_id`, one column `avg_<encoding>_y<year>` per encoding and year. A practice
        with no members in a year takes its average over the years it is observed.
    """
    frame = data.frame
    encoded = _beneficiary_encodings(frame, data.schema)
    if encoded.shape[1] == 0:
        return pd.DataFrame(index=pd.Index(np.unique(frame['practice_id']), name='practice_id'))
    encoded['practice_id'] = frame['practice_id'].to_numpy()
    encoded['year'] = frame['year'].to_numpy()
    by_year = encoded.groupby(['practice_id', 'year']).mean()
    overall = encoded.drop(columns='year').groupby('practice_id').mean()
    blocks = []
    for year in years:
        block = by_year.xs(year, level='year') if year in by_year.index.get_level_values('year') else None
        block = overall.copy() if block is None else block.reindex(overall.index).fillna(overall)
        block.columns = [f'avg_{name}_y{year}' for name in block.columns]
        blocks.append(block)
    return pd.concat(blocks, axis=1)


def analysis_frame(data, level):
    """Rows the forests are fitted on.

    Args:
        data (PanelDataset): Validated panel.
        level (str): `practice` (one row per practice-year, outcome averaged over members, weight = member count) or
            `beneficiary` (one row per record, weight 1).

    Returns:
        (DataFrame): `practice_id`, `year`, `treated`, `outcome`, `weight`, the covariates available at that level,
        and `beneficiary_id` at beneficiary level.

    Raises:
        UnknownLevel: If `level` is not `practice` or `beneficiary`.
    """
    if level not in LEVELS:
        _fail(UnknownLevel, f'Unknown analysis level {level!r}, expected one of {LEVELS}')
    frame = data.frame
    practice_names = [spec.name for spec in data.schema.by_scope('practice')]
    if level == 'beneficiary':
        rows = frame.copy()
        rows['weight'] = 1.0
        return rows
    grouped = frame.groupby(['practice_id', 'year'], sort=True, observed=True)
    rows = grouped.agg(outcome=('outcome', 'mean'), weight=('outcome', 'size'), treated=('treated', 'first'))
    if practice_names:
        rows = rows.join(grouped[practice_names].first())
    rows = rows.reset_index()
    rows['weight'] = rows['weight'].astype(float)
    for spec in data.schema.by_scope('practice'):
        if spec.kind == 'categorical':
            rows[spec.name] = pd.Categorical(rows[spec.name].astype(str), categories=list(spec.levels))
    return rows


def _covariate_column(spec, series, max_cuts):
    if spec.kind == 'categorical':
        codes = pd.Categorical(series.astype(str), categories=list(spec.levels)).codes.astype(np.int64)
        return DesignColumn(spec.name, 'categorical', codes, tuple(spec.levels))
    values = series.astype(float).to_numpy()
    return DesignColumn(spec.name, 'continuous', values, cutpoints=cutpoint_grid(values, max_cuts))


def _continuous_column(name, values, max_cuts):
    values = np.asarray(values, dtype=float)
    return DesignColumn(name, 'continuous', values, cutpoints=cutpoint_grid(values, max_cuts))


def _broadcast_ps(ps, rows):
    if isinstance(ps, pd.Series):
        values = ps.reindex(rows['practice_id'].to_numpy()).to_numpy(dtype=float)
        if np.isnan(values).any():
            _fail(DimensionMismatch, 'Propensity estimates are missing for some practices')
        return values
    values = np.asarray(ps, dtype=float)
    if values.shape != (len(rows),):
        _fail(DimensionMismatch, f'Propensity vector has {values.size} entries, design has {len(rows)} rows')
    return values


def build_design(data, target, level, ps=None, max_cuts=DEFAULT_MAX_CUTS):
    """Builds the μ or τ design matrix.

    Columns, in order: practice covariates; the beneficiary's own covariates (beneficiary level only); composition
    averages of the beneficiary covariates for years 1-2 (μ) or years 1-4 (τ); the year index; the practice label as a
    single categorical column (beneficiary level only); the propensity estimate (μ only).

    Args:
        data (PanelDataset): Validated panel.
        target (str): `mu` or `tau`.
        level (str): `practice` or `beneficiary`.
        ps (array or Series, optional): Per-row propensity estimates, or a Series indexed by `practice_id` that is
            broadcast to the rows. Required for `mu`, ignored for `tau`.
        max_cuts (int): Largest cutpoint grid per continuous column.

    Returns:
        (DesignMatrix): Design with row keys and row weights (member counts at practice level).

    Raises:
        MissingPropensity: If `target` is `mu` and `ps` is None.
        UnknownLevel: If `target` or `level` is unknown.

    Example:
    ```py
    import flexcausal as fc

    tau_design = fc.build_design(data, 'tau', 'practice')
    ```
    """
    if target not in TARGETS:
        _fail(UnknownLevel, f'Unknown design target {target!r}, expected one of {TARGETS}')
    if target == 'mu' and ps is None:
        _fail(MissingPropensity, 'The mu design needs a propensity estimate')
    rows = analysis_frame(data, level)
    schema = data.schema

    columns = [_covariate_column(spec, rows[spec.name], max_cuts) for spec in schema.by_scope('practice')]
    if level == 'beneficiary':
        columns += [_covariate_column(spec, rows[spec.name], max_cuts) for spec in schema.by_scope('beneficiary')]
    averages = composition_averages(data, PRE_YEARS if target == 'mu' else YEARS)
    averages = averages.reindex(rows['practice_id'].to_numpy())
    columns += [_continuous_column(name, averages[name].to_numpy(), max_cuts) for name in averages.columns]
    columns.append(_continuous_column('year', rows['year'].to_numpy(), max_cuts))
    if level == 'beneficiary':
        practice_levels = tuple(np.unique(rows['practice_id'].to_numpy()))
        codes = np.searchsorted(np.asarray(practice_levels), rows['practice_id'].to_numpy())
        columns.append(DesignColumn('practice_id', 'categorical', codes.astype(np.int64), practice_levels))
    if target == 'mu':
        columns.append(_continuous_column('ps', _broadcast_ps(ps, rows), max_cuts))

    key_names = ['practice_id', 'year', 'treated'] + (['beneficiary_id'] if level == 'beneficiary' else [])
    weights = rows['weight'].to_numpy(dtype=float) if level == 'practice' else None
    design = DesignMatrix(columns=columns, row_weights=weights, keys=rows[key_names].reset_index(drop=True))
    logger.debug(f'Built {target} design at {level} level: {design.n} rows, {design.p} columns')
    return design


def propensity_features(data, max_cuts=DEFAULT_MAX_CUTS):
    """One row per practice: practice covariates and pre-period composition averages.

    This is the μ covariate set without the year index and without the propensity estimate itself. Row keys hold
    `practice_id` and `treated`.
    """
    rows = analysis_frame(data, 'practice')
    rows = rows[rows['year'] == rows.groupby('practice_id')['year'].transform('min')].reset_index(drop=True)
    columns = [_covariate_column(spec, rows[spec.name], max_cuts) for spec in data.schema.by_scope('practice')]
    averages = composition_averages(data, PRE_YEARS).reindex(rows['practice_id'].to_numpy())
    columns += [_continuous_column(name, averages[name].to_numpy(), max_cuts) for name in averages.columns]
    keys = rows[['practice_id', 'treated']].reset_index(drop=True)
    return DesignMatrix(columns=columns, row_weights=rows['weight'].to_numpy(dtype=float), keys=keys)
