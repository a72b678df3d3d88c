"""Regression trees, the tree prior and single-tree MH proposals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..data import CutpointGrid, ValidationError
from . import _kernels as K

DEFAULT_CAPACITY = 127


@dataclass(frozen=True)
class TreePrior:
    """Prior for one forest: split probability ``eta * (1 + depth) ** -beta``,
    ``num_trees`` trees and leaf parameters ``N(0, leaf_scale**2)``."""

    eta: float = 0.95
    beta: float = 2.0
    num_trees: int = 200
    leaf_scale: float = 1.0

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise ValidationError("eta must lie in (0, 1)")
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")
        if self.num_trees < 1:
            raise ValidationError("num_trees must be positive")
        if not self.leaf_scale > 0:
            raise ValidationError("leaf_scale must be positive")

    @classmethod
    def from_sigma0(cls, sigma0: float, num_trees: int, eta: float = 0.95,
                    beta: float = 2.0) -> "TreePrior":
        """Leaf scale ``sigma0 / sqrt(L)`` so the forest has pointwise prior sd ``sigma0``."""
        return cls(eta, beta, num_trees, sigma0 / math.sqrt(num_trees))


def split_prob(depth: int, prior: TreePrior) -> float:
    return prior.eta * (1.0 + depth) ** (-prior.beta)


def log_marginal_leaf(n_b: float, s_b: float, sigma: float, sigma_m: float) -> float:
    """Log-likelihood of a leaf's residuals with its parameter integrated out.

    Terms that do not depend on the tree (``-sum r^2 / 2 sigma^2`` and the
    ``2 pi sigma^2`` normalizer) are omitted; they cancel in MH ratios.
    """
    return float(K.log_marginal_leaf(float(n_b), float(s_b), sigma * sigma, sigma_m * sigma_m))


def _blank(capacity: int) -> dict[str, np.ndarray]:
    return dict(
        var=np.full(capacity, -1, np.int32),
        cut=np.full(capacity, -1, np.int32),
        left=np.full(capacity, -1, np.int32),
        right=np.full(capacity, -1, np.int32),
        parent=np.full(capacity, -1, np.int32),
        depth=np.zeros(capacity, np.int32),
        value=np.zeros(capacity),
        active=np.zeros(capacity, np.uint8),
    )


@dataclass(eq=False)
class Tree:
    """Binary tree over node slots; slot 0 is the root.

    Internal nodes carry a rule ``(var, cut)`` where ``cut`` indexes the
    column's cutpoint grid; leaves have ``var == -1`` and a scalar ``value``.
    """

    var: np.ndarray
    cut: np.ndarray
    left: np.ndarray
    right: np.ndarray
    parent: np.ndarray
    depth: np.ndarray
    value: np.ndarray
    active: np.ndarray

    FIELDS = ("var", "cut", "left", "right", "parent", "depth", "value", "active")

    @classmethod
    def root(cls, capacity: int = DEFAULT_CAPACITY, value: float = 0.0) -> "Tree":
        t = cls(**_blank(capacity))
        t.active[0] = 1
        t.value[0] = value
        return t

    def copy(self) -> "Tree":
        return Tree(*(getattr(self, f).copy() for f in self.FIELDS))

    @property
    def capacity(self) -> int:
        return self.var.shape[0]

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero((self.active == 1) & (self.var < 0))

    @property
    def internal(self) -> np.ndarray:
        return np.flatnonzero((self.active == 1) & (self.var >= 0))

    @property
    def n_leaves(self) -> int:
        return int(self.leaves.size)

    @property
    def max_depth(self) -> int:
        return int(self.depth[self.leaves].max())

    def same_structure(self, other: "Tree") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in self.FIELDS if f != "value")

    def key(self, node: int = 0):
        """Hashable topology: nested ``(var, cut, left, right)`` tuples, ``()`` for leaves."""
        if self.var[node] < 0:
            return ()
        return (int(self.var[node]), int(self.cut[node]),
                self.key(int(self.left[node])), self.key(int(self.right[node])))

    def route(self, bins: np.ndarray) -> np.ndarray:
        """Leaf slot of every row; ``bins`` is (p, n) from :meth:`CutpointGrid.bin`."""
        out = np.empty((1, bins.shape[1]), np.int32)
        K.leaf_index_kernel(self.var[None], self.cut[None], self.left[None], self.right[None],
                            bins, out)
        return out[0]

    def predict(self, bins: np.ndarray) -> np.ndarray:
        return self.value[self.route(bins)]


def _ranges(tree: Tree, node: int, ncuts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo = np.empty(ncuts.size, np.int64)
    hi = np.empty(ncuts.size, np.int64)
    K.node_ranges(tree.var, tree.cut, tree.left, tree.parent, node, ncuts, lo, hi)
    return lo, hi


def log_tree_prior(tree: Tree, prior: TreePrior, grid: CutpointGrid) -> float:
    """Log prior probability of a tree structure.

    Each internal node at depth h contributes ``log split_prob(h)`` plus the
    log of a uniform choice of column (among columns with an available cut at
    that node) and cut (among that column's available cuts). Each leaf
    contributes ``log(1 - split_prob(h))``, or 0 when no rule is available at
    the leaf (it cannot split).
    """
    ncuts = grid.ncuts
    total = 0.0
    for node in np.flatnonzero(tree.active == 1):
        lo, hi = _ranges(tree, int(node), ncuts)
        avail = hi > lo
        h = int(tree.depth[node])
        j = int(tree.var[node])
        if j >= 0:
            c = int(tree.cut[node])
            if not (lo[j] <= c < hi[j]):
                raise ValidationError(f"rule ({j}, {c}) at node {node} is not available")
            total += (math.log(split_prob(h, prior)) - math.log(avail.sum())
                      - math.log(hi[j] - lo[j]))
        elif avail.any():
            total += math.log(1.0 - split_prob(h, prior))
    return total


def leaf_suffstats(tree: Tree, resid: np.ndarray, bins: np.ndarray,
                   weights: np.ndarray | None = None) -> dict[int, tuple[float, float]]:
    """Per-leaf ``(n_b, s_b)``: weighted row count and weighted residual sum."""
    w = np.ones_like(resid) if weights is None else weights
    leaf = tree.route(bins)
    out = {}
    for k in tree.leaves:
        rows = leaf == k
        out[int(k)] = (float(np.sum(w[rows] ** 2)), float(np.sum(w[rows] * resid[rows])))
    return out


@dataclass(frozen=True)
class Proposal:
    """Result of a GROW or PRUNE proposal; ``tree`` is None when impossible."""

    tree: Tree | None
    log_proposal_ratio: float = 0.0
    log_prior_ratio: float = 0.0
    node: int = -1

    @property
    def possible(self) -> bool:
        return self.tree is not None


_SCRATCH: dict[int, np.ndarray] = {}


def _scratch(capacity: int) -> np.ndarray:
    if capacity not in _SCRATCH:
        _SCRATCH[capacity] = np.empty(capacity, np.int64)
    return _SCRATCH[capacity]


def propose_grow(tree: Tree, grid: CutpointGrid, prior: TreePrior,
                 rng: np.random.Generator) -> Proposal:
    ncuts = grid.ncuts
    lo = np.empty(ncuts.size, np.int64)
    hi = np.empty(ncuts.size, np.int64)
    u = rng.random(3)
    ok, node, j, c, a, b, lp, lpr = K.grow_proposal(
        tree.var, tree.cut, tree.left, tree.right, tree.parent, tree.depth, tree.active,
        ncuts, prior.eta, prior.beta, u[0], u[1], u[2], lo, hi, _scratch(tree.capacity))
    if not ok:
        return Proposal(None)
    new = tree.copy()
    K.apply_grow(new.var, new.cut, new.left, new.right, new.parent, new.depth, new.value,
                 new.active, node, j, c, a, b)
    return Proposal(new, lp, lpr, node)


def propose_prune(tree: Tree, grid: CutpointGrid, prior: TreePrior,
                  rng: np.random.Generator) -> Proposal:
    ncuts = grid.ncuts
    lo = np.empty(ncuts.size, np.int64)
    hi = np.empty(ncuts.size, np.int64)
    ok, node, lp, lpr = K.prune_proposal(
        tree.var, tree.cut, tree.left, tree.right, tree.parent, tree.depth, tree.active,
        ncuts, prior.eta, prior.beta, rng.random(), lo, hi, _scratch(tree.capacity))
    if not ok:
        return Proposal(None)
    new = tree.copy()
    K.apply_prune(new.var, new.cut, new.left, new.right, new.parent, new.depth, new.value,
                  new.active, node)
    return Proposal(new, lp, lpr, node)


def sample_prior_tree(prior: TreePrior, grid: CutpointGrid, rng: np.random.Generator,
                      capacity: int = DEFAULT_CAPACITY) -> Tree:
    """Forward-simulate a tree (with leaf values) from the prior.

    Written as plain recursion over explicit cut ranges, independently of the
    MH kernels, so it can serve as a reference for them.
    """
    ncuts = grid.ncuts
    tree = Tree.root(capacity)
    slots = iter(range(1, capacity))

    def grow(node, depth, lo, hi):
        avail = [j for j in range(ncuts.size) if hi[j] > lo[j]]
        if avail and rng.random() < split_prob(depth, prior):
            j = avail[rng.integers(len(avail))]
            c = int(rng.integers(lo[j], hi[j]))
            a, b = next(slots), next(slots)
            K.apply_grow(tree.var, tree.cut, tree.left, tree.right, tree.parent, tree.depth,
                         tree.value, tree.active, node, j, c, a, b)
            hl = list(hi)
            hl[j] = c
            lr = list(lo)
            lr[j] = c + 1
            grow(a, depth + 1, lo, hl)
            grow(b, depth + 1, lr, hi)
        else:
            tree.value[node] = rng.normal(0.0, prior.leaf_scale)

    grow(0, 0, [0] * ncuts.size, list(ncuts))
    return tree
