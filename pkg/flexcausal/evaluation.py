"""Module providing the simulation study: replications of every evaluation category, every method fitted on each,
and the frequentist summary of the posterior estimates (RMSE, coverage, interval length).
"""

import hashlib
import json
import logging
import os
import re
import shutil
import tempfile
from dataclasses import dataclass

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .about import __package__
from .dgp import generate, years_key
from .errors import ConfigError, LengthMismatch, ZeroBaselineLength
from .estimands import ATT_LABEL, EstimateSummary, estimate
from .panel import analysis_frame, build_design, propensity_features
from .propensity import fit_propensity, predict_ps
from .sampler import TMP_ENV, fit
from .settings import RunConfig

# Access the logger created in __init__.py
logger = logging.getLogger(__package__)

AVERAGE_LABEL = 'SATT(avg)'
PLOT_COLUMNS = ['method', 'category', 'rep', 'estimand', 'point', 'lower', 'upper', 'truth', 'error', 'covered',
                'length', 'relative_length']
_LABEL = re.compile(r'^(LASSO|GBM)\(([SD])\)(?:/(practice|beneficiary))?$')


@dataclass(frozen=True)
class MethodConfig:
    """One estimator of the study: propensity model, splitting prior and analysis level.

    Labels look like `GBM(S)`, `LASSO(D)` or `GBM(S)/beneficiary`.
    """
    ps_method: str
    sparsity: str
    level: str = 'practice'

    @property
    def label(self):
        suffix = '' if self.level == 'practice' else f'/{self.level}'
        return f'{self.ps_method.upper()}({self.sparsity}){suffix}'

    @classmethod
    def parse(cls, label):
        match = _LABEL.match(label)
        if match is None:
            raise ConfigError(f'Bad method label {label!r}, expected e.g. GBM(S) or LASSO(D)/beneficiary')
        method, sparsity, level = match.groups()
        return cls(ps_method=method.lower(), sparsity=sparsity, level=level or 'practice')


def _as_intervals(intervals):
    intervals = np.asarray(intervals, dtype=float)
    if intervals.ndim != 2 or intervals.shape[1] != 2:
        raise LengthMismatch('Intervals must be given as (lower, upper) pairs')
    return intervals


def _check_lengths(first, second):
    if len(first) != len(second):
        raise LengthMismatch(f'{len(first)} estimates for {len(second)} truths')
    if len(first) == 0:
        raise LengthMismatch('Nothing to evaluate')


def rmse(estimates, truths):
    """Root mean squared error of point estimates."""
    _check_lengths(estimates, truths)
    errors = np.asarray(estimates, dtype=float) - np.asarray(truths, dtype=float)
    return float(np.sqrt(np.mean(errors ** 2)))


def coverage(intervals, truths):
    """Share of `(lower, upper)` intervals containing their truth, bounds included."""
    _check_lengths(intervals, truths)
    intervals = _as_intervals(intervals)
    truths = np.asarray(truths, dtype=float)
    return float(np.mean((intervals[:, 0] <= truths) & (truths <= intervals[:, 1])))


@dataclass(frozen=True)
class RelativeLength:
    ratio_of_means: float
    ratios: np.ndarray


def relative_length(method_intervals, baseline_intervals):
    """Interval lengths of a method relative to a baseline on the same replications.

    Returns:
        (RelativeLength): Ratio of mean lengths and the per-replication ratios.

    Raises:
        ZeroBaselineLength: If a baseline interval has zero length.
    """
    _check_lengths(method_intervals, baseline_intervals)
    mine = np.diff(_as_intervals(method_intervals), axis=1).ravel()
    theirs = np.diff(_as_intervals(baseline_intervals), axis=1).ravel()
    if np.any(theirs <= 0.0):
        raise ZeroBaselineLength('A baseline interval has zero length')
    return RelativeLength(ratio_of_means=float(np.mean(mine) / np.mean(theirs)), ratios=mine / theirs)


def fit_and_estimate(data, truth, method, settings, seed, keep_archive=None):
    """Default estimator of the study: propensity model, both forests, then every requested estimand.

    Args:
        data (PanelDataset): Replication panel.
        truth (TruthRecord): Unused by the estimator itself.
        method (MethodConfig): Estimator to run.
        settings (RunConfig): Run configuration.
        seed (int): Seed of the propensity fit and of the chain.
        keep_archive (str, optional): Directory to keep the posterior archive in; a temporary one is removed otherwise.

    Returns:
        (dict): Estimand label -> `EstimateSummary`.
    """
    rng = np.random.default_rng(seed)
    features = propensity_features(data, settings.sampler.max_cuts)
    model = fit_propensity(features, method.ps_method, settings.propensity, rng)
    ps = pd.Series(predict_ps(model, features), index=features.keys['practice_id'].to_numpy())
    mu_design = build_design(data, 'mu', method.level, ps=ps, max_cuts=settings.sampler.max_cuts)
    tau_design = build_design(data, 'tau', method.level, max_cuts=settings.sampler.max_cuts)
    y = analysis_frame(data, method.level)['outcome'].to_numpy(dtype=float)

    out_dir = keep_archive or tempfile.mkdtemp(prefix='flexcausal-', dir=os.environ.get(TMP_ENV))
    try:
        archive = fit(mu_design, tau_design, y, tau_design.zmask(), settings.sampler_config(method.sparsity, seed),
                      out_dir=out_dir)
        return estimate(archive, tau_design, settings.estimands.request(data.schema))
    finally:
        if keep_archive is None:
            shutil.rmtree(out_dir, ignore_errors=True)


def _replication_seed(seed, category, rep):
    return int(np.random.SeedSequence([seed, category, rep]).generate_state(1)[0])


def _cache_key(settings, category, rep, method, estimator):
    payload = json.dumps({'settings': settings.to_dict(), 'category': category, 'rep': rep, 'method': method.label,
                          'estimator': getattr(estimator, '__qualname__', repr(estimator))}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _run_replication(category, rep, methods, settings, estimator, cache_dir):
    dgp_config = settings.dgp.dgp_config(seed=settings.study.seed, category=category)
    data, truth = generate(dgp_config, rep)
    seed = _replication_seed(settings.study.seed, category, rep)
    records, failures = [], []
    for method in methods:
        key = _cache_key(settings, category, rep, method, estimator)
        cached = os.path.join(cache_dir, f'{key}.json') if cache_dir else None
        if cached and os.path.exists(cached):
            with open(cached, encoding='utf-8') as f:
                entry = json.load(f)
            records += entry['records']
            failures += entry['failures']
            continue

        method_records, method_failures = [], []
        try:
            estimates = estimator(data, truth, method, settings, seed)
        except Exception as error:
            logger.warning(f'{method.label} failed on category {category} replication {rep}: {error}')
            method_failures.append({'method': method.label, 'category': category, 'rep': rep,
                                    'error': f'{type(error).__name__}: {error}'})
        else:
            for estimand, summary in estimates.items():
                truth_value = truth.target(estimand, settings.study.truth, settings.estimands.years)
                method_records.append({
                    'method': method.label, 'category': category, 'rep': rep, 'estimand': estimand,
                    'point': summary.point, 'lower': summary.lower, 'upper': summary.upper, 'truth': truth_value,
                })
        if cached:
            with open(cached, 'w', encoding='utf-8') as f:
                json.dump({'records': method_records, 'failures': method_failures}, f)
        records += method_records
        failures += method_failures
    return records, failures


class EvalReport:
    """Results of a simulation study.

    Attributes:
        records (DataFrame): One row per method, category, replication and estimand with the point estimate, the
            interval and the truth.
        failures (DataFrame): One row per failed fit.
        summary (DataFrame): Per method, category and estimand: `rmse`, `coverage`, `mean_length`,
            `relative_length` (ratio of mean lengths to the baseline), `replications` and `failures`. Rows with
            estimand `SATT(avg)` average the subgroup rows of the same method and category.
        baseline (str): Label of the method interval lengths are compared with.
    """

    def __init__(self, records, failures, baseline):
        columns = ['method', 'category', 'rep', 'estimand', 'point', 'lower', 'upper', 'truth']
        self.records = pd.DataFrame(records, columns=columns)
        self.failures = pd.DataFrame(failures, columns=['method', 'category', 'rep', 'error'])
        self.baseline = baseline
        self.summary = self._summarize()

    def _paired_baseline(self, frame):
        """Baseline `(lower, upper)` of the same category, replication and estimand for every row, NaN if absent."""
        keys = ['category', 'rep', 'estimand']
        base = self.records.loc[self.records['method'] == self.baseline, keys + ['lower', 'upper']]
        base = base.rename(columns={'lower': 'base_lower', 'upper': 'base_upper'})
        merged = frame[keys].merge(base, how='left', on=keys)
        return merged[['base_lower', 'base_upper']].to_numpy(dtype=float)

    def _summarize(self):
        if self.baseline not in set(self.records['method']):
            logger.warning(f'Baseline {self.baseline} has no result, relative lengths are undefined')
        failures = self.failures.groupby(['method', 'category']).size()
        rows = []
        for (method, category, estimand), group in self.records.groupby(['method', 'category', 'estimand'],
                                                                        sort=True):
            intervals = group[['lower', 'upper']].to_numpy()
            paired = self._paired_baseline(group)
            relative = np.nan
            if not np.isnan(paired).any():
                try:
                    relative = relative_length(intervals, paired).ratio_of_means
                except ZeroBaselineLength:
                    logger.warning(f'Zero-length baseline interval for {estimand} in category {category}')
            rows.append({
                'method': method, 'category': category, 'estimand': estimand,
                'rmse': rmse(group['point'], group['truth']),
                'coverage': coverage(intervals, group['truth']),
                'mean_length': float(np.mean(intervals[:, 1] - intervals[:, 0])),
                'relative_length': relative,
                'replications': len(group),
                'failures': int(failures.get((method, category), 0)),
            })
        summary = pd.DataFrame(rows, columns=['method', 'category', 'estimand', 'rmse', 'coverage', 'mean_length',
                                              'relative_length', 'replications', 'failures'])
        subgroups = summary[summary['estimand'] != ATT_LABEL]
        if not subgroups.empty:
            averages = subgroups.groupby(['method', 'category'], as_index=False).agg(
                rmse=('rmse', 'mean'), coverage=('coverage', 'mean'), mean_length=('mean_length', 'mean'),
                relative_length=('relative_length', 'mean'), replications=('replications', 'min'),
                failures=('failures', 'max'),
            )
            averages['estimand'] = AVERAGE_LABEL
            summary = pd.concat([summary, averages[summary.columns]], ignore_index=True)
        return summary.sort_values(['method', 'category', 'estimand'], kind='mergesort').reset_index(drop=True)

    def plot_data(self):
        """Long table of the per-replication estimates, errors and interval lengths relative to the baseline."""
        data = self.records.copy()
        paired = self._paired_baseline(data)
        base_length = paired[:, 1] - paired[:, 0]
        data['length'] = data['upper'] - data['lower']
        with np.errstate(divide='ignore', invalid='ignore'):
            data['relative_length'] = np.where(base_length > 0.0, data['length'].to_numpy() / base_length, np.nan)
        data['covered'] = (data['lower'] <= data['truth']) & (data['truth'] <= data['upper'])
        data['error'] = data['point'] - data['truth']
        return data[PLOT_COLUMNS]

    def failure_counts(self):
        """Failed fits per method."""
        return {str(method): int(count) for method, count in self.failures.groupby('method').size().items()}

    def to_dict(self):
        """JSON-ready report: baseline, summary rows (NaN as null), failure counts and record count."""
        return {
            'baseline': self.baseline,
            'summary': json.loads(self.summary.to_json(orient='records', double_precision=15)),
            'failures': self.failure_counts(),
            'records': len(self.records),
        }

    def save(self, out_dir, plot_data=False):
        """Writes `report.csv`, `report.json`, `records.csv`, `failures.csv` and optionally `plot_data.csv`."""
        os.makedirs(out_dir, exist_ok=True)
        self.summary.to_csv(os.path.join(out_dir, 'report.csv'), index=False)
        with open(os.path.join(out_dir, 'report.json'), 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)
        self.records.to_csv(os.path.join(out_dir, 'records.csv'), index=False)
        self.failures.to_csv(os.path.join(out_dir, 'failures.csv'), index=False)
        if plot_data:
            self.plot_data().to_csv(os.path.join(out_dir, 'plot_data.csv'), index=False)


def run_study(methods=None, categories=None, reps=None, settings=None, estimator=None, workers=1, cache_dir=None):
    """Runs every method on every replication of every category.

    Replications are processed in parallel and collected in (category, replication) order, so the report does not
    depend on `workers`. Each method on a replication is fitted with a seed derived from the study seed, the category
    and the replication only, which makes the report independent of the method order. A failing fit is recorded in
    `EvalReport.failures` and the study goes on.

    Args:
        methods (list): `MethodConfig` objects or labels; `settings.study.methods` when None.
        categories (list): Categories 1..5; `settings.study.categories` when None.
        reps (int): Replications per category, at least 2; `settings.study.replications` when None.
        settings (RunConfig, optional): Run configuration, defaults when None.
        estimator (callable, optional): `estimator(data, truth, method, settings, seed) -> {label: EstimateSummary}`;
            `fit_and_estimate` when None.
        workers (int): Parallel processes.
        cache_dir (str, optional): Directory of per-replication results reused by later runs with the same inputs.

    Returns:
        (EvalReport): Records, failures and summary.

    Example:
    ```py
    import flexcausal as fc

    report = fc.run_study(['LASSO(S)', 'GBM(S)'], categories=[3], reps=20, workers=4)
    print(report.summary)
    ```
    """
    settings = settings or RunConfig()
    estimator = estimator or fit_and_estimate
    methods = [MethodConfig.parse(method) if isinstance(method, str) else method
               for method in (methods or settings.study.methods)]
    categories = list(categories or settings.study.categories)
    reps = settings.study.replications if reps is None else reps
    if reps < 2:
        raise ConfigError(f'A study needs at least 2 replications, got {reps}')
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)

    tasks = [(category, rep) for category in categories for rep in range(reps)]
    logger.info(f'Running {len(tasks)} replications x {len(methods)} methods on {workers} worker(s)')
    results = Parallel(n_jobs=workers)(
        delayed(_run_replication)(category, rep, methods, settings, estimator, cache_dir) for category, rep in tasks
    )
    records = [record for part, _ in results for record in part]
    failures = [failure for _, part in results for failure in part]
    report = EvalReport(records, failures, settings.study.baseline)
    if failures:
        logger.warning(f'{len(failures)} fit(s) failed, see the failures table')
    return report


def truth_estimator(data, truth, method, settings, seed):
    """Estimator returning the sample truths as zero-length intervals; checks the reporting pipeline."""
    years = settings.estimands.years
    return {label: EstimateSummary(value, value, value, 1)
            for label, value in truth.sample[years_key(years)].items()}


