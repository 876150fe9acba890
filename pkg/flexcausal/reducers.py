"""Streaming reducers consuming one posterior draw of τ at a time.

A reducer exposes `update(values)`, `empty_copy()`, `merge(other)` and `result()`. `predict_tau` feeds it the τ values
of one draw for every requested row, so memory stays independent of the number of draws times rows.
"""

import copy
import logging

import numpy as np

from .about import __package__
from .errors import DimensionMismatch, EmptySubgroup

# Access the logger created in __init__.py
logger = logging.getLogger(__package__)


class GroupMeans:
    """Per-draw weighted means of τ over groups of rows.

    Args:
        groups (dict or list): Group name -> boolean mask over the rows, or a list of masks.
        weights (array, optional): Row weights, unit weights when None.

    Raises:
        DimensionMismatch: Masks or weights of different lengths.
        EmptySubgroup: A group with no row or zero total weight.

    Example:
    ```py
    import flexcausal as fc

    reducer = fc.GroupMeans({'ATT': np.ones(design.n, dtype=bool)}, weights=design.weights())
    table = fc.predict_tau(archive, design, reducer)
    ```
    """

    def __init__(self, groups, weights=None):
        if isinstance(groups, dict):
            self.names = list(groups)
            masks = [np.asarray(mask, dtype=bool) for mask in groups.values()]
        else:
            masks = [np.asarray(mask, dtype=bool) for mask in groups]
            self.names = [f'group{index}' for index in range(len(masks))]
        if not masks:
            raise DimensionMismatch('GroupMeans needs at least one group')
        n = masks[0].size
        if any(mask.size != n for mask in masks):
            raise DimensionMismatch('Group masks have different lengths')
        weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        if weights.size != n:
            raise DimensionMismatch(f'{weights.size} weights for {n} rows')

        self._matrix = np.vstack([np.where(mask, weights, 0.0) for mask in masks])
        self._totals = self._matrix.sum(axis=1)
        for name, mask, total in zip(self.names, masks, self._totals):
            if not mask.any() or total <= 0.0:
                text = f'Subgroup {name} selects no weighted row'
                logger.error(text)
                raise EmptySubgroup(text)
        self._draws = []

    @property
    def n_rows(self):
        return self._matrix.shape[1]

    @property
    def n_draws(self):
        return len(self._draws)

    def update(self, values):
        self._draws.append(self._matrix @ values / self._totals)

    def empty_copy(self):
        other = copy.copy(self)
        other._draws = []
        return other

    def merge(self, other):
        """Appends the draws of `other` after the draws already held."""
        self._draws.extend(other._draws)
        return self

    def result(self):
        """Table of shape (draws, groups)."""
        return np.array(self._draws).reshape(len(self._draws), len(self.names))


class StreamingQuantiles:
    """Per-row posterior mean and approximate quantiles from a bounded reservoir of draws.

    The mean is exact. Quantiles are exact while at most `capacity` draws were seen; beyond that they are computed on a
    uniform reservoir sample of the draws shared by all rows.

    Args:
        probs (sequence): Quantile levels in [0, 1].
        capacity (int): Reservoir size per row.
        seed (int or SeedSequence): Seed of the reservoir replacement decisions.
    """

    def __init__(self, probs=(0.05, 0.5, 0.95), capacity=512, seed=0):
        self.probs = np.asarray(probs, dtype=float)
        self.capacity = int(capacity)
        self._seed = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._rng = np.random.default_rng(self._seed)
        self._buffer = None
        self._sum = None
        self.seen = 0

    def _filled(self):
        return self._buffer[:, :min(self.seen, self.capacity)]

    def update(self, values):
        values = np.asarray(values, dtype=float)
        if self._buffer is None:
            self._buffer = np.empty((values.size, self.capacity))
            self._sum = np.zeros(values.size)
        if self.seen < self.capacity:
            self._buffer[:, self.seen] = values
        else:
            slot = self._rng.integers(0, self.seen + 1)
            if slot < self.capacity:
                self._buffer[:, slot] = values
        self._sum += values
        self.seen += 1

    def empty_copy(self):
        return StreamingQuantiles(self.probs, self.capacity, seed=self._seed.spawn(1)[0])

    def merge(self, other):
        """Combines two reservoirs as if all draws had streamed through one."""
        if other.seen == 0:
            return self
        if self.seen == 0:
            self._buffer = other._buffer.copy()
            self._sum = other._sum.copy()
            self.seen = other.seen
            return self
        mine, theirs = self._filled(), other._filled()
        if mine.shape[1] + theirs.shape[1] <= self.capacity:
            kept = np.hstack([mine, theirs])
        else:
            from_mine = self._rng.hypergeometric(self.seen, other.seen, self.capacity)
            pick_mine = np.sort(self._rng.choice(mine.shape[1], from_mine, replace=False))
            pick_theirs = np.sort(self._rng.choice(theirs.shape[1], self.capacity - from_mine, replace=False))
            kept = np.hstack([mine[:, pick_mine], theirs[:, pick_theirs]])
        self._buffer = np.empty((kept.shape[0], self.capacity))
        self._buffer[:, :kept.shape[1]] = kept
        self._sum = self._sum + other._sum
        self.seen += other.seen
        return self

    def result(self):
        """Dictionary with the per-row `mean` and a (rows, len(probs)) `quantiles` array."""
        if self.seen == 0:
            raise ValueError('No draw was reduced')
        return {
            'mean': self._sum / self.seen,
            'quantiles': np.quantile(self._filled(), self.probs, axis=1).T,
            'draws': self.seen,
        }
