"""Module providing binary regression trees, their leaf-assignment caches and their text serialization.

Nodes are addressed by heap index: the root is 1 and the children of node `k` are `2k` (left) and `2k + 1` (right).
A continuous split sends a row left iff `value <= cutpoint`; a categorical split sends it left iff its level index is
in `left_levels`.

Tree line grammar (space separated tokens, ascending node index):

- internal continuous node: `n<idx>:v<var>:c<cutpoint>`
- internal categorical node: `n<idx>:v<var>:s<hex bitmask of left levels>`
- leaf: `l<idx>:m<leaf mean>`

A forest file starts with `flexcausal-forest v1 <tag> trees=<M> draws=<D> p=<P>` followed by `D * M` tree lines in
draw-major order.
"""

import gzip
import logging
import re
from dataclasses import dataclass

import numpy as np

from .about import __package__
from .errors import EmptyChild, NotPrunable, ParseError

# Access the logger created in __init__.py
logger = logging.getLogger(__package__)

MAX_DEPTH = 32
FOREST_MAGIC = 'flexcausal-forest'
FORMAT_VERSION = 'v1'
FOREST_TAGS = ('mu', 'tau', 'propensity')

_TOKEN = re.compile(r'^(?:n(\d+):v(\d+):(?:c([^\s:]+)|s([0-9a-f]+))|l(\d+):m([^\s:]+))$')
_HEADER = re.compile(r'^' + FOREST_MAGIC + r' (v\d+) (\w+) trees=(\d+) draws=(\d+) p=(\d+)$')


@dataclass(frozen=True)
class SplitRule:
    """Decision rule of an internal node.

    Attributes:
        var (int): Column index in the design matrix.
        cutpoint (float): Threshold of a continuous split, None for categorical splits.
        left_levels (frozenset): Level indices sent left by a categorical split, None for continuous splits.
    """
    var: int
    cutpoint: float = None
    left_levels: frozenset = None

    @classmethod
    def continuous(cls, var, cutpoint):
        return cls(var=int(var), cutpoint=float(cutpoint))

    @classmethod
    def categorical(cls, var, left_levels):
        return cls(var=int(var), left_levels=frozenset(int(level) for level in left_levels))

    @property
    def is_categorical(self):
        return self.left_levels is not None

    def goes_left(self, values):
        """Boolean array, True where the row goes to the left child."""
        if self.is_categorical:
            return np.isin(values, np.fromiter(self.left_levels, dtype=np.int64))
        return values <= self.cutpoint

    def goes_left_scalar(self, value):
        if self.is_categorical:
            return int(value) in self.left_levels
        return value <= self.cutpoint


class RegressionTree:
    """Binary regression tree with heap-indexed nodes.

    Attributes:
        rules (dict): Internal node index -> `SplitRule`.
        leaves (dict): Leaf index -> leaf mean (standardized-outcome units).
    """

    def __init__(self, leaf_mean=0.0):
        self.rules = {}
        self.leaves = {1: float(leaf_mean)}

    def copy(self):
        tree = RegressionTree()
        tree.rules = dict(self.rules)
        tree.leaves = dict(self.leaves)
        return tree

    def __eq__(self, other):
        return isinstance(other, RegressionTree) and self.rules == other.rules and self.leaves == other.leaves

    def __repr__(self):
        return f'RegressionTree({serialize_tree(self)!r})'

    @staticmethod
    def depth(index):
        return int(index).bit_length() - 1

    @property
    def n_leaves(self):
        return len(self.leaves)

    @property
    def is_stump(self):
        return not self.rules

    def leaf_indices(self):
        return sorted(self.leaves)

    def nog_nodes(self):
        """Internal nodes whose two children are leaves, i.e. the nodes a PRUNE move may collapse."""
        return sorted(node for node in self.rules if 2 * node in self.leaves and 2 * node + 1 in self.leaves)

    def split_counts(self, p):
        counts = np.zeros(p, dtype=np.int64)
        for rule in self.rules.values():
            counts[rule.var] += 1
        return counts

    def max_var(self):
        return max((rule.var for rule in self.rules.values()), default=-1)


def design_row(design, i):
    """Values of row `i` of a design matrix, one entry per column."""
    return [column.values[i] for column in design.columns]


def assign_leaf(tree, row):
    """Leaf reached by one row.

    Args:
        tree (RegressionTree): Tree to descend.
        row (sequence): Design row, e.g. from `design_row()`.

    Returns:
        (int): Heap index of the leaf.
    """
    node = 1
    while node in tree.rules:
        rule = tree.rules[node]
        node = 2 * node if rule.goes_left_scalar(row[rule.var]) else 2 * node + 1
    return node


def assign_leaves(tree, design, rows=None):
    """Vectorized leaf assignment of many rows.

    Returns:
        (ndarray): Leaf index per row of `rows` (all rows when None).
    """
    rows = np.arange(design.n) if rows is None else np.asarray(rows)
    out = np.empty(rows.size, dtype=np.int64)
    stack = [(1, np.arange(rows.size))]
    while stack:
        node, positions = stack.pop()
        if node not in tree.rules:
            out[positions] = node
            continue
        rule = tree.rules[node]
        left = rule.goes_left(design.columns[rule.var].values[rows[positions]])
        stack.append((2 * node, positions[left]))
        stack.append((2 * node + 1, positions[~left]))
    return out


def evaluate_tree(tree, design, rows=None):
    """Leaf mean reached by every row."""
    rows = np.arange(design.n) if rows is None else np.asarray(rows)
    out = np.empty(rows.size)
    stack = [(1, np.arange(rows.size))]
    while stack:
        node, positions = stack.pop()
        if node not in tree.rules:
            out[positions] = tree.leaves[node]
            continue
        rule = tree.rules[node]
        left = rule.goes_left(design.columns[rule.var].values[rows[positions]])
        stack.append((2 * node, positions[left]))
        stack.append((2 * node + 1, positions[~left]))
    return out


def evaluate_forest(trees, design):
    total = np.zeros(design.n)
    for tree in trees:
        total += evaluate_tree(tree, design)
    return total


class LeafAssignment:
    """Map from observations to the leaves of one tree plus per-leaf sufficient statistics.

    Members of every leaf are kept as ascending row indices, so sums over a leaf are reproducible bit for bit.

    Attributes:
        leaf_of (ndarray): Leaf index per observation.
        members (dict): Leaf index -> ascending row indices.
        counts (dict): Leaf index -> member count.
        resid_sums (dict): Leaf index -> sum of the bound residual vector over the members.
        resid (ndarray): Residual vector the sums refer to, or None.
        touched (int): Number of rows routed or summed since creation (locality instrumentation).
    """

    def __init__(self, leaf_of, resid=None):
        self.leaf_of = np.asarray(leaf_of, dtype=np.int64)
        self.resid = resid
        self.members = {}
        self.counts = {}
        self.resid_sums = {}
        self.touched = 0
        order = np.argsort(self.leaf_of, kind='stable')
        leaves, starts = np.unique(self.leaf_of[order], return_index=True)
        bounds = list(starts[1:]) + [order.size]
        for leaf, start, stop in zip(leaves, starts, bounds):
            rows = order[start:stop]
            self.members[int(leaf)] = rows
            self.counts[int(leaf)] = int(rows.size)
            self.resid_sums[int(leaf)] = float(np.sum(resid[rows])) if resid is not None else 0.0

    @classmethod
    def from_tree(cls, tree, design, resid=None):
        """Assignment computed from scratch by descending every row."""
        assignment = cls(assign_leaves(tree, design), resid=resid)
        for leaf in tree.leaves:
            if leaf not in assignment.members:
                assignment.members[leaf] = np.empty(0, dtype=np.int64)
                assignment.counts[leaf] = 0
                assignment.resid_sums[leaf] = 0.0
        return assignment

    def bind(self, resid):
        """Binds a new residual vector; sums are refreshed lazily with `refresh()`."""
        self.resid = resid

    def refresh(self, leaf):
        rows = self.members[leaf]
        self.resid_sums[leaf] = float(np.sum(self.resid[rows])) if self.resid is not None else 0.0
        self.touched += rows.size
        return self.resid_sums[leaf]

    def same_as(self, other):
        """True when both assignments agree on every row, count and residual sum."""
        if not np.array_equal(self.leaf_of, other.leaf_of):
            return False
        mine = {leaf for leaf, count in self.counts.items() if count}
        theirs = {leaf for leaf, count in other.counts.items() if count}
        if mine != theirs:
            return False
        return all(
            np.array_equal(self.members[leaf], other.members[leaf])
            and self.resid_sums[leaf] == other.resid_sums[leaf]
            for leaf in mine
        )


def split_rows(assignment, leaf, rule, design):
    """Partition of the members of `leaf` under `rule`.

    Returns:
        (tuple): `(left_rows, right_rows)` as ascending row indices.
    """
    rows = assignment.members[leaf]
    left = rule.goes_left(design.columns[rule.var].values[rows])
    assignment.touched += rows.size
    return rows[left], rows[~left]


def grow(tree, assignment, leaf, rule, rows, left_mean=0.0, right_mean=0.0, partition=None):
    """Turns a leaf into an internal node with two new leaves.

    Only the members of `leaf` are re-routed; other assignments are untouched. The children's residual sums are
    summed over their own members.

    Args:
        tree (RegressionTree): Tree to modify in place.
        assignment (LeafAssignment): Assignment of `tree`, modified in place.
        leaf (int): Terminal node to split.
        rule (SplitRule): Split rule of the new internal node.
        rows (DesignMatrix): Design the assignment refers to.
        left_mean (float): Mean of the new left leaf.
        right_mean (float): Mean of the new right leaf.
        partition (tuple, optional): Precomputed `split_rows()` result.

    Returns:
        (tuple): `(tree, assignment)`.

    Raises:
        EmptyChild: If one of the children would receive no observation; nothing is modified.
    """
    if leaf not in tree.leaves:
        raise ValueError(f'Node {leaf} is not a leaf')
    if RegressionTree.depth(leaf) >= MAX_DEPTH:
        raise ValueError(f'Node {leaf} is at the maximum depth {MAX_DEPTH}')
    left_rows, right_rows = partition if partition is not None else split_rows(assignment, leaf, rule, rows)
    if left_rows.size == 0 or right_rows.size == 0:
        logger.debug(f'Split of leaf {leaf} on variable {rule.var} leaves a child empty')
        raise EmptyChild(f'Split of leaf {leaf} leaves a child empty')

    left, right = 2 * leaf, 2 * leaf + 1
    tree.rules[leaf] = rule
    del tree.leaves[leaf]
    tree.leaves[left] = float(left_mean)
    tree.leaves[right] = float(right_mean)

    assignment.leaf_of[left_rows] = left
    assignment.leaf_of[right_rows] = right
    for child, child_rows in ((left, left_rows), (right, right_rows)):
        assignment.members[child] = child_rows
        assignment.counts[child] = int(child_rows.size)
        assignment.resid_sums[child] = \
            float(np.sum(assignment.resid[child_rows])) if assignment.resid is not None else 0.0
    assignment.touched += left_rows.size + right_rows.size
    for stats in (assignment.members, assignment.counts, assignment.resid_sums):
        del stats[leaf]
    return tree, assignment


def prune(tree, assignment, internal_node, mean=0.0):
    """Collapses an internal node whose children are both leaves.

    Members are merged and residual sums added.

    Returns:
        (tuple): `(tree, assignment)`.

    Raises:
        NotPrunable: If the node is not internal or one of its children is internal.
    """
    left, right = 2 * internal_node, 2 * internal_node + 1
    if internal_node not in tree.rules or left not in tree.leaves or right not in tree.leaves:
        text = f'Node {internal_node} can not be pruned, its children are not both leaves'
        logger.error(text)
        raise NotPrunable(text)

    del tree.rules[internal_node]
    del tree.leaves[left]
    del tree.leaves[right]
    tree.leaves[internal_node] = float(mean)

    merged = np.sort(np.concatenate([assignment.members[left], assignment.members[right]]), kind='stable')
    assignment.leaf_of[merged] = internal_node
    assignment.members[internal_node] = merged
    assignment.counts[internal_node] = assignment.counts[left] + assignment.counts[right]
    assignment.resid_sums[internal_node] = assignment.resid_sums[left] + assignment.resid_sums[right]
    assignment.touched += merged.size
    for stats in (assignment.members, assignment.counts, assignment.resid_sums):
        del stats[left]
        del stats[right]
    return tree, assignment


def format_real(value):
    """Shortest decimal that parses back to the same double, without a trailing `.0`."""
    text = repr(float(value))
    return text[:-2] if text.endswith('.0') else text


def _levels_to_hex(levels):
    mask = 0
    for level in levels:
        mask |= 1 << level
    return format(mask, 'x')


def _hex_to_levels(text):
    mask = int(text, 16)
    levels = []
    level = 0
    while mask:
        if mask & 1:
            levels.append(level)
        mask >>= 1
        level += 1
    return frozenset(levels)


def serialize_tree(tree):
    """One text line describing the tree.

    Example:
    ```py
    import flexcausal as fc

    tree = fc.RegressionTree(0.0)
    fc.serialize_tree(tree)
    # 'l1:m0'
    ```
    """
    tokens = []
    for index in sorted(set(tree.rules) | set(tree.leaves)):
        if index in tree.rules:
            rule = tree.rules[index]
            if rule.is_categorical:
                tokens.append(f'n{index}:v{rule.var}:s{_levels_to_hex(rule.left_levels)}')
            else:
                tokens.append(f'n{index}:v{rule.var}:c{format_real(rule.cutpoint)}')
        else:
            tokens.append(f'l{index}:m{format_real(tree.leaves[index])}')
    return ' '.join(tokens)


def _parse_real(text, offset):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(offset, f'not a number: {text!r}') from None
    if not np.isfinite(value):
        raise ParseError(offset, f'non finite number: {text!r}')
    return value


def parse_tree(text, base_offset=0):
    """Inverse of `serialize_tree()`.

    Args:
        text (str): One tree line.
        base_offset (int): Byte offset of the line inside its file, added to reported offsets.

    Returns:
        (RegressionTree): Parsed tree.

    Raises:
        ParseError: With the byte offset of the offending token and the reason.
    """
    tree = RegressionTree()
    tree.leaves = {}
    offset = base_offset
    seen = set()
    for token in text.split(' '):
        match = _TOKEN.match(token)
        if match is None:
            raise ParseError(offset, f'malformed token {token!r}')
        node, var, cut, mask, leaf, mean = match.groups()
        index = int(node if node is not None else leaf)
        if index < 1 or RegressionTree.depth(index) > MAX_DEPTH:
            raise ParseError(offset, f'node index {index} out of range')
        if index in seen:
            raise ParseError(offset, f'node {index} defined twice')
        seen.add(index)
        if node is not None:
            if cut is not None:
                tree.rules[index] = SplitRule.continuous(int(var), _parse_real(cut, offset))
            else:
                levels = _hex_to_levels(mask)
                if not levels:
                    raise ParseError(offset, f'empty level set at node {index}')
                tree.rules[index] = SplitRule.categorical(int(var), levels)
        else:
            tree.leaves[index] = _parse_real(mean, offset)
        offset += len(token.encode()) + 1

    if 1 not in seen:
        raise ParseError(base_offset, 'missing root node')
    for index in seen:
        if index > 1 and index // 2 not in tree.rules:
            raise ParseError(base_offset, f'node {index} has no internal parent')
    for index in tree.rules:
        if 2 * index not in seen or 2 * index + 1 not in seen:
            raise ParseError(base_offset, f'internal node {index} lacks a child')
    return tree


def open_text(path, mode):
    """Text handle on a plain or gzip-compressed (`.gz`) UTF-8 file."""
    if str(path).endswith('.gz'):
        return gzip.open(path, mode + 't', encoding='utf-8', newline='\n')
    return open(path, mode, encoding='utf-8', newline='\n')


def forest_header(tag, n_trees, n_draws, p):
    return f'{FOREST_MAGIC} {FORMAT_VERSION} {tag} trees={n_trees} draws={n_draws} p={p}'


def parse_forest_header(line):
    """Returns `(tag, n_trees, n_draws, p)` of a forest header line."""
    match = _HEADER.match(line.rstrip('\r\n'))
    if match is None:
        raise ParseError(0, f'bad forest header {line.strip()!r}')
    version, tag, n_trees, n_draws, p = match.groups()
    if version != FORMAT_VERSION:
        raise ParseError(len(FOREST_MAGIC) + 1, f'unsupported format version {version}')
    if tag not in FOREST_TAGS:
        raise ParseError(len(FOREST_MAGIC) + len(version) + 2, f'unknown forest tag {tag}')
    return tag, int(n_trees), int(n_draws), int(p)


class ForestWriter:
    """Appends serialized forests to a file, one draw at a time.

    Example:
    ```py
    import flexcausal as fc

    with fc.ForestWriter('tau.forest', 'tau', n_trees=50, n_draws=2000, p=12) as writer:
        writer.write_draw(trees)
    ```
    """

    def __init__(self, path, tag, n_trees, n_draws, p):
        self.path = path
        self.n_trees = n_trees
        self.written = 0
        self._file = open_text(path, 'w')
        self._file.write(forest_header(tag, n_trees, n_draws, p) + '\n')

    def write_draw(self, trees):
        if len(trees) != self.n_trees:
            raise ValueError(f'Expected {self.n_trees} trees per draw, got {len(trees)}')
        self._file.write(''.join(serialize_tree(tree) + '\n' for tree in trees))
        self.written += 1

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ForestReader:
    """Reads a forest file written by `ForestWriter`.

    Attributes:
        tag (str): `mu`, `tau` or `propensity`.
        n_trees (int): Trees per draw.
        n_draws (int): Draws announced by the header.
        p (int): Covariate count of the design the trees split on.
    """

    def __init__(self, path):
        self.path = path
        with open_text(path, 'r') as f:
            self.tag, self.n_trees, self.n_draws, self.p = parse_forest_header(f.readline())

    def iter_draws(self, start=0, stop=None):
        """Yields the list of trees of every draw in `[start, stop)`.

        Raises:
            ParseError: Bad tree line, a split variable outside `[0, p)`, or a truncated file.
        """
        stop = self.n_draws if stop is None else min(stop, self.n_draws)
        with open_text(self.path, 'r') as f:
            header = f.readline()
            offset = len(header.encode())
            line_number = 0
            first = start * self.n_trees
            last = stop * self.n_trees
            trees = []
            for line in f:
                if line_number >= last:
                    break
                if line_number >= first:
                    tree = parse_tree(line.rstrip('\r\n'), base_offset=offset)
                    if tree.max_var() >= self.p:
                        raise ParseError(offset, f'split variable {tree.max_var()} outside p={self.p}')
                    trees.append(tree)
                    if len(trees) == self.n_trees:
                        yield trees
                        trees = []
                offset += len(line.encode())
                line_number += 1
            if line_number < last:
                raise ParseError(offset, f'file ends after {line_number} tree lines, expected {last}')

    def __iter__(self):
        return self.iter_draws()
