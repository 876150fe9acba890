"""Module providing the MCMC sampler of the causal forest and its on-disk posterior archive.

The standardized outcome is modelled as `y = mu(x) + z * tau(x) + e`, `e ~ N(0, sigma^2)`, where `mu` and `tau` are
sums of regression trees and `z` is 1 on rows of treated practices in years 3 and 4. The τ forest only sees the rows
with `z = 1`. Each tree is updated by a GROW or PRUNE Metropolis-Hastings move followed by a conjugate redraw of the
leaf means of the affected region.

Locality: every update reads and writes only the residuals of the rows in the affected leaf (or in the two children of
the affected node). `naive_update_one_tree` recomputes everything from scratch and consumes the random stream in the
same order; it exists to check the local updater.
"""

import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .about import __package__
from .errors import ConfigError, DegenerateOutcome, DimensionMismatch, NoTreatedRows, ParseError
from .priors import (
    TreePriorParams, LeafPriorParams, SplitProbVector, NoisePriorParams, split_prob, leaf_posterior,
    marginal_loglik, draw_sigma, update_split_probs,
)
from .trees import (
    MAX_DEPTH, RegressionTree, SplitRule, LeafAssignment, assign_leaves, evaluate_tree, evaluate_forest, split_rows,
    grow, prune, format_real, open_text, ForestWriter, ForestReader,
)

# Access the logger created in __init__.py
logger = logging.getLogger(__package__)

GROW_PROB = 0.5
PRUNE_PROB = 0.5
ARCHIVE_FORMAT = 'flexcausal-archive v1'
ARCHIVE_FILE = 'archive.json'
TMP_ENV = 'FLEXCAUSAL_TMP'


@dataclass
class SamplerConfig:
    """Settings of one MCMC run.

    Leaf scales and `sigma_hat` left to None are calibrated from the data (see `fit`).
    """
    burn_in: int = 1000
    draws: int = 2000
    thin: int = 1
    seed: int = 0
    mu_trees: int = 200
    tau_trees: int = 50
    tree_prior: TreePriorParams = field(default_factory=TreePriorParams)
    leaf_sd_mu: float = None
    leaf_sd_tau: float = None
    nu: float = 3.0
    q: float = 0.9
    sigma_hat: float = None
    sparsity_mu: str = 'uniform'
    sparsity_tau: str = 'uniform'
    concentration: float = 1.0
    max_cuts: int = 100
    save_mu_forest: bool = False
    compress: bool = False

    def __post_init__(self):
        if isinstance(self.tree_prior, dict):
            self.tree_prior = TreePriorParams(**self.tree_prior)
        if self.burn_in < 0 or self.draws < 1 or self.thin < 1:
            raise ConfigError(f'Invalid chain length burn_in={self.burn_in}, draws={self.draws}, thin={self.thin}')
        if self.mu_trees < 1 or self.tau_trees < 1:
            raise ConfigError(f'Forests need at least one tree, got {self.mu_trees} and {self.tau_trees}')


class Forest:
    """Sum of regression trees with cached leaf assignments and fitted values.

    Attributes:
        tag (str): `mu` or `tau`.
        design (DesignMatrix): Rows and covariates the trees split on.
        rows (ndarray): Position of every design row in the full residual vector.
        trees (list): `RegressionTree` objects.
        assignments (list): One `LeafAssignment` per tree.
        fit (ndarray): Sum of the trees on every design row.
        split_probs (SplitProbVector): Splitting-variable probabilities.
        proposed, accepted (dict): GROW/PRUNE counters.
        empty_child (int): GROW proposals rejected because a child would be empty.
        touched_rows (int): Rows read or written by all updates so far; `last_touched` for the latest update.
    """

    def __init__(self, tag, design, n_trees, tree_prior, leaf_sd, split_probs, rows=None):
        self.tag = tag
        self.design = design
        self.tree_prior = tree_prior
        self.leaf_sd = float(leaf_sd)
        self.split_probs = split_probs
        self.rows = np.arange(design.n) if rows is None else np.asarray(rows, dtype=np.int64)
        self.trees = [RegressionTree(0.0) for _ in range(n_trees)]
        self.assignments = [LeafAssignment(np.ones(design.n, dtype=np.int64)) for _ in range(n_trees)]
        self.fit = np.zeros(design.n)
        self.proposed = {'grow': 0, 'prune': 0}
        self.accepted = {'grow': 0, 'prune': 0}
        self.empty_child = 0
        self.touched_rows = 0
        self.last_touched = 0

    @property
    def n_trees(self):
        return len(self.trees)

    @property
    def p(self):
        return self.design.p

    def split_counts(self):
        counts = np.zeros(self.p, dtype=np.int64)
        for tree in self.trees:
            counts += tree.split_counts(self.p)
        return counts

    def diagnostics(self):
        return {
            'proposed': dict(self.proposed),
            'accepted': dict(self.accepted),
            'empty_child': self.empty_child,
            'touched_rows': self.touched_rows,
            'mean_leaves': float(np.mean([tree.n_leaves for tree in self.trees])),
        }


class FitState:
    """Mutable state of the chain: both forests, the noise level and the full residual vector.

    `resid = y_std - mu.fit - zmask * tau.fit` is kept current by every tree update.
    """

    def __init__(self, y_std, zmask, mu, tau, sigma, noise_prior):
        self.y_std = np.asarray(y_std, dtype=float)
        self.zmask = np.asarray(zmask, dtype=bool)
        self.mu = mu
        self.tau = tau
        self.sigma = float(sigma)
        self.noise_prior = noise_prior
        self.resid = self.y_std - self.mu.fit - self.tau_fit()
        self.sweeps = 0

    def tau_fit(self):
        """τ forest fit scattered onto all rows, zero where `zmask` is 0."""
        full = np.zeros(self.y_std.size)
        full[self.tau.rows] = self.tau.fit
        return full

    def check_integrity(self, atol=1e-8):
        """Recomputes fits, residuals and leaf assignments from scratch and compares them with the caches.

        Returns:
            (bool): True when every cache agrees; mismatches are logged as errors.
        """
        ok = True
        for forest in (self.mu, self.tau):
            fit = evaluate_forest(forest.trees, forest.design)
            if not np.allclose(fit, forest.fit, rtol=0.0, atol=atol):
                logger.error(f'Cached {forest.tag} fit drifted from its trees')
                ok = False
            for index, (tree, assignment) in enumerate(zip(forest.trees, forest.assignments)):
                if not np.array_equal(assign_leaves(tree, forest.design), assignment.leaf_of):
                    logger.error(f'Leaf assignment of {forest.tag} tree {index} is stale')
                    ok = False
                live = {leaf for leaf, count in assignment.counts.items() if count}
                if not live <= set(tree.leaves):
                    logger.error(f'Assignment of {forest.tag} tree {index} references internal nodes')
                    ok = False
        if not np.allclose(self.resid, self.y_std - self.mu.fit - self.tau_fit(), rtol=0.0, atol=atol):
            logger.error('Residual vector drifted from the forest fits')
            ok = False
        return ok

    def diagnostics(self):
        return {'sweeps': self.sweeps, 'sigma': self.sigma, 'mu': self.mu.diagnostics(), 'tau': self.tau.diagnostics()}


def _draw_index(rng, probs):
    cumulative = np.cumsum(probs)
    index = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side='right'))
    return min(index, probs.size - 1)


def _propose_rule(forest, rows, rng):
    """Random split rule for a leaf holding `rows`, or None when the drawn variable can not split it."""
    var = _draw_index(rng, forest.split_probs.s)
    column = forest.design.columns[var]
    if column.is_categorical:
        present = np.unique(column.values[rows])
        if present.size < 2:
            return None
        while True:
            picks = rng.random(present.size) < 0.5
            if 0 < picks.sum() < present.size:
                return SplitRule.categorical(var, present[picks])
    if column.cutpoints.size == 0:
        return None
    return SplitRule.continuous(var, column.cutpoints[rng.integers(column.cutpoints.size)])


def _growable(tree):
    return [leaf for leaf in tree.leaf_indices() if RegressionTree.depth(leaf) < MAX_DEPTH]


def _stats(values):
    return values.size, float(np.sum(values)), float(np.dot(values, values))


def _grow_log_ratio(forest, sigma, depth, n_growable, n_nog_after, was_stump, left, right):
    """Log MH ratio of splitting a leaf at `depth` into children with statistics `left` and `right`.

    The prior probability of the split rule equals its proposal probability and cancels.
    """
    parent = (left[0] + right[0], left[1] + right[1], left[2] + right[2])
    loglik = (marginal_loglik(*left, sigma, forest.leaf_sd) + marginal_loglik(*right, sigma, forest.leaf_sd)
              - marginal_loglik(*parent, sigma, forest.leaf_sd))
    p_node = split_prob(depth, forest.tree_prior)
    p_child = split_prob(depth + 1, forest.tree_prior) if depth + 1 < MAX_DEPTH else 0.0
    log_prior = np.log(p_node) + 2.0 * np.log1p(-p_child) - np.log1p(-p_node)
    log_proposal = np.log(PRUNE_PROB / n_nog_after) - np.log((1.0 if was_stump else GROW_PROB) / n_growable)
    return loglik + log_prior + log_proposal


def _draw_leaf(forest, stats, sigma, rng):
    mean, sd = leaf_posterior(stats[0], stats[1], sigma, forest.leaf_sd)
    return mean + sd * rng.standard_normal()


def _shift(forest, resid, local_rows, delta):
    resid[forest.rows[local_rows]] -= delta
    forest.fit[local_rows] += delta


def update_one_tree(forest, tree_idx, resid, sigma, rng):
    """One GROW or PRUNE proposal on a tree followed by the redraw of the affected leaf means.

    The partial residual of the tree (residual plus the tree's own contribution) is formed on the fly for the rows of
    the affected region only. `resid` and `forest.fit` are updated in place on those rows.

    Args:
        forest (Forest): Forest holding the tree.
        tree_idx (int): Tree position in the forest.
        resid (ndarray): Full residual vector, indexed through `forest.rows`.
        sigma (float): Current noise sd.
        rng (Generator): Random stream.

    Returns:
        (bool): True when the proposed move was accepted.
    """
    tree = forest.trees[tree_idx]
    assignment = forest.assignments[tree_idx]
    move = 'grow' if tree.is_stump or rng.random() < GROW_PROB else 'prune'
    forest.proposed[move] += 1
    if move == 'grow':
        return _grow_step(forest, tree, assignment, resid, sigma, rng)
    return _prune_step(forest, tree, assignment, resid, sigma, rng)


def _grow_step(forest, tree, assignment, resid, sigma, rng):
    growable = _growable(tree)
    forest.last_touched = 0
    if not growable:
        return False
    leaf = growable[rng.integers(len(growable))]
    rows = assignment.members[leaf]
    rule = _propose_rule(forest, rows, rng)
    forest.last_touched = rows.size
    forest.touched_rows += rows.size
    if rule is None:
        return False
    left_rows, right_rows = split_rows(assignment, leaf, rule, forest.design)
    if left_rows.size == 0 or right_rows.size == 0:
        forest.empty_child += 1
        return False

    old = tree.leaves[leaf]
    left = _stats(resid[forest.rows[left_rows]] + old)
    right = _stats(resid[forest.rows[right_rows]] + old)
    sibling_is_leaf = leaf > 1 and (leaf ^ 1) in tree.leaves
    n_nog_after = len(tree.nog_nodes()) + 1 - (1 if sibling_is_leaf else 0)
    log_ratio = _grow_log_ratio(forest, sigma, RegressionTree.depth(leaf), len(growable), n_nog_after,
                                tree.is_stump, left, right)
    accepted = np.log(rng.random()) < log_ratio

    if accepted:
        grow(tree, assignment, leaf, rule, forest.design, partition=(left_rows, right_rows))
        for child, child_rows, stats in ((2 * leaf, left_rows, left), (2 * leaf + 1, right_rows, right)):
            mean = _draw_leaf(forest, stats, sigma, rng)
            tree.leaves[child] = float(mean)
            assignment.resid_sums[child] = stats[1]
            _shift(forest, resid, child_rows, mean - old)
        forest.accepted['grow'] += 1
    else:
        merged = (left[0] + right[0], left[1] + right[1], left[2] + right[2])
        mean = _draw_leaf(forest, merged, sigma, rng)
        tree.leaves[leaf] = float(mean)
        assignment.resid_sums[leaf] = merged[1]
        _shift(forest, resid, rows, mean - old)
    return bool(accepted)


def _prune_step(forest, tree, assignment, resid, sigma, rng):
    nogs = tree.nog_nodes()
    node = nogs[rng.integers(len(nogs))]
    left_node, right_node = 2 * node, 2 * node + 1
    left_rows, right_rows = assignment.members[left_node], assignment.members[right_node]
    old_left, old_right = tree.leaves[left_node], tree.leaves[right_node]
    forest.last_touched = left_rows.size + right_rows.size
    forest.touched_rows += forest.last_touched

    left = _stats(resid[forest.rows[left_rows]] + old_left)
    right = _stats(resid[forest.rows[right_rows]] + old_right)
    depth = RegressionTree.depth(node)
    n_growable_after = len(_growable(tree)) - (2 if depth + 1 < MAX_DEPTH else 0) + 1
    log_ratio = -_grow_log_ratio(forest, sigma, depth, n_growable_after, len(nogs), node == 1, left, right)
    accepted = np.log(rng.random()) < log_ratio

    if accepted:
        merged = (left[0] + right[0], left[1] + right[1], left[2] + right[2])
        prune(tree, assignment, node)
        mean = _draw_leaf(forest, merged, sigma, rng)
        tree.leaves[node] = float(mean)
        assignment.resid_sums[node] = merged[1]
        _shift(forest, resid, left_rows, mean - old_left)
        _shift(forest, resid, right_rows, mean - old_right)
        forest.accepted['prune'] += 1
    else:
        for child, child_rows, stats, old in ((left_node, left_rows, left, old_left),
                                              (right_node, right_rows, right, old_right)):
            mean = _draw_leaf(forest, stats, sigma, rng)
            tree.leaves[child] = float(mean)
            assignment.resid_sums[child] = stats[1]
            _shift(forest, resid, child_rows, mean - old)
    return bool(accepted)


def naive_update_one_tree(forest, tree_idx, resid, sigma, rng):
    """Reference updater: recomputes the leaf assignment and the whole tree contribution before and after the move.

    Consumes `rng` exactly like `update_one_tree`, so both produce the same chain from the same state.
    """
    tree = forest.trees[tree_idx]
    design = forest.design
    leaf_of = assign_leaves(tree, design)
    before = evaluate_tree(tree, design)
    partial = resid[forest.rows] + before
    forest.last_touched = design.n
    forest.touched_rows += design.n

    move = 'grow' if tree.is_stump or rng.random() < GROW_PROB else 'prune'
    forest.proposed[move] += 1
    candidate = tree.copy()
    accepted = False
    if move == 'grow':
        growable = _growable(tree)
        if not growable:
            return False
        leaf = growable[rng.integers(len(growable))]
        in_leaf = leaf_of == leaf
        rule = _propose_rule(forest, np.flatnonzero(in_leaf), rng)
        if rule is None:
            return False
        goes_left = rule.goes_left(design.columns[rule.var].values)
        left_rows = np.flatnonzero(in_leaf & goes_left)
        right_rows = np.flatnonzero(in_leaf & ~goes_left)
        if left_rows.size == 0 or right_rows.size == 0:
            forest.empty_child += 1
            return False
        left, right = _stats(partial[left_rows]), _stats(partial[right_rows])
        grown = tree.copy()
        grown.rules[leaf] = rule
        del grown.leaves[leaf]
        grown.leaves[2 * leaf] = grown.leaves[2 * leaf + 1] = 0.0
        log_ratio = _grow_log_ratio(forest, sigma, RegressionTree.depth(leaf), len(growable),
                                    len(grown.nog_nodes()), tree.is_stump, left, right)
        accepted = bool(np.log(rng.random()) < log_ratio)
        if accepted:
            candidate = grown
            candidate.leaves[2 * leaf] = float(_draw_leaf(forest, left, sigma, rng))
            candidate.leaves[2 * leaf + 1] = float(_draw_leaf(forest, right, sigma, rng))
            forest.accepted['grow'] += 1
        else:
            merged = (left[0] + right[0], left[1] + right[1], left[2] + right[2])
            candidate.leaves[leaf] = float(_draw_leaf(forest, merged, sigma, rng))
    else:
        nogs = tree.nog_nodes()
        node = nogs[rng.integers(len(nogs))]
        left = _stats(partial[np.flatnonzero(leaf_of == 2 * node)])
        right = _stats(partial[np.flatnonzero(leaf_of == 2 * node + 1)])
        pruned = tree.copy()
        del pruned.rules[node]
        del pruned.leaves[2 * node]
        del pruned.leaves[2 * node + 1]
        pruned.leaves[node] = 0.0
        log_ratio = -_grow_log_ratio(forest, sigma, RegressionTree.depth(node), len(_growable(pruned)), len(nogs),
                                     pruned.is_stump, left, right)
        accepted = bool(np.log(rng.random()) < log_ratio)
        if accepted:
            candidate = pruned
            merged = (left[0] + right[0], left[1] + right[1], left[2] + right[2])
            candidate.leaves[node] = float(_draw_leaf(forest, merged, sigma, rng))
            forest.accepted['prune'] += 1
        else:
            candidate.leaves[2 * node] = float(_draw_leaf(forest, left, sigma, rng))
            candidate.leaves[2 * node + 1] = float(_draw_leaf(forest, right, sigma, rng))

    delta = evaluate_tree(candidate, design) - before
    resid[forest.rows] -= delta
    forest.fit += delta
    forest.trees[tree_idx] = candidate
    forest.assignments[tree_idx] = LeafAssignment.from_tree(candidate, design)
    return accepted


def sweep(state, rng, updater=None):
    """One Gibbs sweep: every μ tree, every τ tree, the noise sd, then the splitting probabilities."""
    updater = updater or update_one_tree
    for forest in (state.mu, state.tau):
        for index in range(forest.n_trees):
            updater(forest, index, state.resid, state.sigma, rng)
    state.sigma = draw_sigma(float(np.dot(state.resid, state.resid)), state.resid.size, state.noise_prior, rng)
    for forest in (state.mu, state.tau):
        forest.split_probs = update_split_probs(forest.split_counts(), forest.split_probs, rng)
    state.sweeps += 1


def _sigma_hat(design, zmask, y_std, max_levels=20):
    """Residual sd of a least-squares fit of the standardized outcome on the design columns and `zmask`."""
    blocks = [np.ones(y_std.size), zmask.astype(float)]
    for column in design.columns:
        if column.is_categorical:
            if column.n_levels <= max_levels:
                blocks += [(column.values == level).astype(float) for level in range(1, column.n_levels)]
        else:
            blocks.append(column.values.astype(float))
    matrix = np.column_stack(blocks)
    coefficients, _, rank, _ = np.linalg.lstsq(matrix, y_std, rcond=None)
    dof = y_std.size - rank
    if dof <= 0:
        return float(np.std(y_std))
    residuals = y_std - matrix @ coefficients
    sigma = float(np.sqrt(np.dot(residuals, residuals) / dof))
    return sigma if np.isfinite(sigma) and sigma > 0.0 else float(np.std(y_std))


def make_state(mu_design, tau_design, y, zmask, config):
    """Standardizes the outcome, calibrates the priors and builds the initial chain state (all trees are stumps at 0).

    Returns:
        (tuple): `(state, y_mean, y_sd)`.

    Raises:
        DimensionMismatch: Designs, outcome and mask of different lengths.
        DegenerateOutcome: Outcome with zero variance or non finite values.
        NoTreatedRows: `zmask` is 0 everywhere.
    """
    y = np.asarray(y, dtype=float)
    zmask = np.asarray(zmask).astype(bool)
    if not mu_design.n == tau_design.n == y.size == zmask.size:
        text = f'Row counts differ: mu {mu_design.n}, tau {tau_design.n}, outcome {y.size}, mask {zmask.size}'
        logger.error(text)
        raise DimensionMismatch(text)
    y_sd = float(np.std(y)) if y.size else 0.0
    if not np.all(np.isfinite(y)) or not y_sd > 0.0:
        text = 'Outcome has no variance, nothing to fit'
        logger.error(text)
        raise DegenerateOutcome(text)
    treated = np.flatnonzero(zmask)
    if treated.size == 0:
        text = 'No treated row in years 3-4, the effect forest has nothing to fit'
        logger.error(text)
        raise NoTreatedRows(text)

    y_mean = float(np.mean(y))
    y_std = (y - y_mean) / y_sd
    leaf = LeafPriorParams.calibrate(y_std, config.mu_trees, config.tau_trees)
    leaf = LeafPriorParams(leaf_sd_mu=config.leaf_sd_mu or leaf.leaf_sd_mu,
                           leaf_sd_tau=config.leaf_sd_tau or leaf.leaf_sd_tau)
    sigma_hat = config.sigma_hat or _sigma_hat(mu_design, zmask, y_std)
    noise = NoisePriorParams.calibrate(sigma_hat, config.nu, config.q)

    mu = Forest('mu', mu_design, config.mu_trees, config.tree_prior, leaf.leaf_sd_mu,
                SplitProbVector.uniform(mu_design.p, config.sparsity_mu, config.concentration))
    tau = Forest('tau', tau_design.subset(treated, regrid=True, max_cuts=config.max_cuts), config.tau_trees,
                 config.tree_prior, leaf.leaf_sd_tau,
                 SplitProbVector.uniform(tau_design.p, config.sparsity_tau, config.concentration), rows=treated)
    return FitState(y_std, zmask, mu, tau, sigma_hat, noise), y_mean, y_sd


def fit(mu_design, tau_design, y, zmask, config=None, out_dir=None, updater=None, metadata=None):
    """Runs the chain and streams the retained draws into a posterior archive.

    Args:
        mu_design (DesignMatrix): Prognostic covariates, all rows.
        tau_design (DesignMatrix): Effect covariates, all rows (restricted to `zmask` rows internally).
        y (array): Outcome per row.
        zmask (array): 1 on rows of treated practices in years 3-4.
        config (SamplerConfig, optional): Chain settings, defaults when None.
        out_dir (str, optional): Archive directory; a fresh directory under `$FLEXCAUSAL_TMP` (or the system
            temporary directory) when None.
        updater (callable, optional): Tree updater, `update_one_tree` when None.
        metadata (dict, optional): Extra JSON entries stored in `archive.json`, e.g. the analysis level.

    Returns:
        (PosteriorArchive): Archive holding `config.draws` retained draws.

    Example:
    ```py
    import flexcausal as fc

    archive = fc.fit(mu_design, tau_design, y, tau_design.zmask(), fc.SamplerConfig(burn_in=500, draws=1000))
    ```
    """
    config = config or SamplerConfig()
    state, y_mean, y_sd = make_state(mu_design, tau_design, y, zmask, config)
    rng = np.random.default_rng(config.seed)
    if out_dir is None:
        out_dir = tempfile.mkdtemp(prefix='flexcausal-', dir=os.environ.get(TMP_ENV))
    writer = ArchiveWriter(out_dir, config, y_mean, y_sd, mu_design, tau_design, state)
    writer.manifest['metadata'] = dict(metadata or {})
    total = config.burn_in + config.draws * config.thin
    logger.info(f'Sampling {total} sweeps ({config.burn_in} burn-in) on {state.y_std.size} rows, '
                f'{state.tau.design.n} treated')
    try:
        for iteration in range(total):
            sweep(state, rng, updater)
            kept = iteration - config.burn_in
            if kept >= 0 and kept % config.thin == 0:
                writer.append(state)
            if (iteration + 1) % 100 == 0:
                logger.debug(f'Sweep {iteration + 1}/{total}: sigma={state.sigma:.4f}')
    except BaseException:
        writer.close(state.diagnostics(), complete=False)
        raise
    archive = writer.close(state.diagnostics())
    logger.info(f'Posterior archive written to {out_dir}')
    return archive


def _format_vector(values):
    return ','.join(format_real(value) for value in values)


class ArchiveWriter:
    """Writes the retained draws of a chain: forest files, scalar lines and the `archive.json` manifest."""

    def __init__(self, path, config, y_mean, y_sd, mu_design, tau_design, state):
        os.makedirs(path, exist_ok=True)
        self.path = path
        suffix = '.gz' if config.compress else ''
        self.files = {
            'tau': f'tau.forest{suffix}',
            'mu': f'mu.forest{suffix}' if config.save_mu_forest else None,
            'scalars': f'scalars.txt{suffix}',
        }
        self.tau = ForestWriter(os.path.join(path, self.files['tau']), 'tau', config.tau_trees, config.draws,
                                tau_design.p)
        self.mu = None
        if config.save_mu_forest:
            self.mu = ForestWriter(os.path.join(path, self.files['mu']), 'mu', config.mu_trees, config.draws,
                                   mu_design.p)
        self.scalars = open_text(os.path.join(path, self.files['scalars']), 'w')
        self.manifest = {
            'format': ARCHIVE_FORMAT,
            'y_mean': y_mean,
            'y_sd': y_sd,
            'n_rows': int(state.y_std.size),
            'n_treated': int(state.tau.design.n),
            'tau_columns': tau_design.names,
            'mu_columns': mu_design.names,
            'leaf_sd_mu': state.mu.leaf_sd,
            'leaf_sd_tau': state.tau.leaf_sd,
            'noise_prior': asdict(state.noise_prior),
            'config': asdict(config),
            'files': self.files,
        }

    def append(self, state):
        index = self.tau.written
        self.tau.write_draw(state.tau.trees)
        if self.mu is not None:
            self.mu.write_draw(state.mu.trees)
        self.scalars.write(f'd{index}:sigma={format_real(state.sigma)}\n'
                           f'd{index}:s_tau={_format_vector(state.tau.split_probs.s)}\n'
                           f'd{index}:s_mu={_format_vector(state.mu.split_probs.s)}\n')

    def close(self, diagnostics, complete=True):
        for handle in (self.tau, self.mu, self.scalars):
            if handle is not None:
                handle.close()
        self.manifest.update(draws=self.tau.written, complete=complete, diagnostics=diagnostics)
        with open(os.path.join(self.path, ARCHIVE_FILE), 'w', encoding='utf-8') as f:
            json.dump(self.manifest, f, indent=2)
        return PosteriorArchive(self.path) if complete else None


class PosteriorArchive:
    """Read access to an archive directory written by `fit`.

    Attributes:
        path (str): Archive directory.
        y_mean, y_sd (float): Outcome standardization; τ draws are reported in outcome units (`tau_std * y_sd`).
        n_draws (int): Retained draws.
        tau_names, mu_names (list): Design columns the forests were fitted on.
        manifest (dict): Full content of `archive.json`.

    Raises:
        ParseError: If `archive.json` is not a flexcausal archive manifest or the chain did not complete.
    """

    def __init__(self, path):
        self.path = path
        manifest_path = os.path.join(path, ARCHIVE_FILE)
        try:
            with open(manifest_path, encoding='utf-8') as f:
                manifest = json.load(f)
        except json.JSONDecodeError as error:
            raise ParseError(error.pos, f'bad archive manifest: {error.msg}') from None
        if manifest.get('format') != ARCHIVE_FORMAT:
            raise ParseError(0, f'{manifest_path} is not a {ARCHIVE_FORMAT} manifest')
        if not manifest.get('complete', False):
            raise ParseError(0, f'{manifest_path} describes an interrupted chain')
        self.manifest = manifest
        self.y_mean = manifest['y_mean']
        self.y_sd = manifest['y_sd']
        self.n_draws = manifest['draws']
        self.tau_names = manifest['tau_columns']
        self.mu_names = manifest['mu_columns']

    @property
    def metadata(self):
        return self.manifest.get('metadata', {})

    @property
    def has_mu(self):
        return self.manifest['files'].get('mu') is not None

    def _reader(self, tag):
        name = self.manifest['files'].get(tag)
        if name is None:
            raise ConfigError(f'Archive {self.path} holds no {tag} forest, refit with save_mu_forest')
        return ForestReader(os.path.join(self.path, name))

    def tau_draws(self, start=0, stop=None):
        """Yields the τ trees of every draw in `[start, stop)`."""
        return self._reader('tau').iter_draws(start, stop)

    def mu_draws(self, start=0, stop=None):
        return self._reader('mu').iter_draws(start, stop)

    def _scalar_lines(self, key):
        with open_text(os.path.join(self.path, self.manifest['files']['scalars']), 'r') as f:
            for line in f:
                draw, _, rest = line.partition(':')
                name, _, value = rest.rstrip('\r\n').partition('=')
                if name == key:
                    yield int(draw[1:]), value

    def sigmas(self):
        """Noise sd per draw in outcome units."""
        return np.array([float(value) for _, value in self._scalar_lines('sigma')]) * self.y_sd

    def split_probs(self, tag='tau'):
        """Splitting probabilities per draw, shape (draws, p)."""
        rows = [np.array(value.split(','), dtype=float) for _, value in self._scalar_lines(f's_{tag}')]
        return np.vstack(rows) if rows else np.empty((0, 0))


def _reduce_draws(path, rows, reducer, start, stop):
    archive = PosteriorArchive(path)
    for trees in archive.tau_draws(start, stop):
        reducer.update(evaluate_forest(trees, rows) * archive.y_sd)
    return reducer


def predict_tau(archive, rows, reducer, workers=1):
    """Streams every τ draw over `rows` into `reducer`.

    Args:
        archive (PosteriorArchive): Fitted archive.
        rows (DesignMatrix): Rows to predict, with the columns of the τ design the archive was fitted on.
        reducer: `GroupMeans`, `StreamingQuantiles` or any object with the reducer interface; it should be empty.
        workers (int): Parallel processes, each reducing a contiguous block of draws.

    Returns:
        The reducer's `result()`.

    Raises:
        DimensionMismatch: If the columns of `rows` differ from the archive's τ columns.
    """
    if rows.names != archive.tau_names:
        text = f'Prediction rows have columns {rows.names}, the archive was fitted on {archive.tau_names}'
        logger.error(text)
        raise DimensionMismatch(text)
    if workers <= 1 or archive.n_draws < 2:
        return _reduce_draws(archive.path, rows, reducer, 0, archive.n_draws).result()

    blocks = [block for block in np.array_split(np.arange(archive.n_draws), workers) if block.size]
    parts = Parallel(n_jobs=len(blocks))(
        delayed(_reduce_draws)(archive.path, rows, reducer.empty_copy(), int(block[0]), int(block[-1]) + 1)
        for block in blocks
    )
    for part in parts:
        reducer.merge(part)
    return reducer.result()
