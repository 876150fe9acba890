"""Shared builders for the test suites: small designs, small panels and hand-written posterior archives."""
import json
import os

import numpy as np

import flexcausal as fc
from flexcausal.dgp import years_key
from flexcausal.panel import DesignColumn, DesignMatrix, cutpoint_grid
from flexcausal.trees import ForestWriter, format_real

SMALL_DGP = dict(practices=60, median_beneficiaries=6, size_sigma=0.3)


def continuous_column(name, values, max_cuts=100):
    values = np.asarray(values, dtype=float)
    return DesignColumn(name, 'continuous', values, cutpoints=cutpoint_grid(values, max_cuts))


def categorical_column(name, codes, levels):
    return DesignColumn(name, 'categorical', np.asarray(codes, dtype=np.int64), tuple(levels))


def make_design(n=300, seed=0, categorical=True):
    """Design with two continuous columns and optionally one three-level categorical column."""
    rng = np.random.default_rng(seed)
    columns = [continuous_column('x0', rng.standard_normal(n)), continuous_column('x1', rng.uniform(0, 1, n))]
    if categorical:
        columns.append(categorical_column('g', rng.integers(0, 3, n), ('a', 'b', 'c')))
    return DesignMatrix(columns=columns)


def effect_problem(n=600, effect=2.0, noise=0.5, seed=1):
    """Outcome `x0 + effect * z + noise`, with z independent of the covariates."""
    rng = np.random.default_rng(seed)
    design = make_design(n, seed=seed)
    z = (rng.random(n) < 0.5).astype(np.int8)
    y = design.columns[0].values + effect * z + noise * rng.standard_normal(n)
    return design, y, z


def quick_config(**overrides):
    settings = dict(burn_in=30, draws=30, mu_trees=10, tau_trees=5, seed=3)
    settings.update(overrides)
    return fc.SamplerConfig(**settings)


def write_archive(path, names, draws, y_sd=1.0):
    """Archive holding the given τ draws, each a list of trees in standardized units."""
    os.makedirs(path, exist_ok=True)
    n_trees = len(draws[0])
    with ForestWriter(os.path.join(path, 'tau.forest'), 'tau', n_trees, len(draws), len(names)) as writer:
        for trees in draws:
            writer.write_draw(trees)
    with open(os.path.join(path, 'scalars.txt'), 'w', encoding='utf-8') as f:
        for index in range(len(draws)):
            f.write(f'd{index}:sigma={format_real(1.0)}\n')
    manifest = {
        'format': 'flexcausal-archive v1', 'complete': True, 'y_mean': 0.0, 'y_sd': y_sd,
        'draws': len(draws), 'tau_columns': list(names), 'mu_columns': [],
        'files': {'tau': 'tau.forest', 'mu': None, 'scalars': 'scalars.txt'},
    }
    with open(os.path.join(path, 'archive.json'), 'w', encoding='utf-8') as f:
        json.dump(manifest, f)
    return fc.PosteriorArchive(path)


def write_stump_archive(path, names, leaf_values, y_sd=1.0):
    """Archive whose draw `d` is one τ stump with mean `leaf_values[d]`."""
    return write_archive(path, names, [[fc.RegressionTree(value)] for value in leaf_values], y_sd)


def small_panel(category=3, rep=0, seed=0, **overrides):
    settings = dict(SMALL_DGP)
    settings.update(overrides)
    return fc.generate(fc.DgpConfig.for_category(category, seed=seed, **settings), rep)


def truth_plus_seed_estimator(data, truth, method, settings, seed):
    """Estimates equal to the truth shifted by a seed-dependent amount, with unit-length intervals."""
    shift = (seed % 1000) / 10000.0
    values = truth.sample[years_key(settings.estimands.years)]
    return {label: fc.EstimateSummary(value + shift, value - 0.5, value + 0.5, 10) for label, value in values.items()}


def failing_estimator(data, truth, method, settings, seed):
    if method.ps_method == 'gbm':
        raise fc.SingleClass('simulated failure')
    return truth_plus_seed_estimator(data, truth, method, settings, seed)


def tiny_run_config(**blocks):
    config = {
        'dgp': dict(SMALL_DGP, category=3, replications=1),
        'propensity': {'method': 'lasso', 'folds': 3},
        'sampler': {'burn_in': 10, 'draws': 10, 'mu_trees': 5, 'tau_trees': 3},
        'study': {'replications': 2, 'categories': [3], 'methods': ['LASSO(S)']},
    }
    config.update(blocks)
    return config
