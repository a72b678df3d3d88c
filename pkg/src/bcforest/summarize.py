"""Posterior exploration: a parsimonious regression tree fit to CATE point
estimates, and posterior contrasts between covariate-defined subgroups."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bcf import percentile
from .data import DesignMatrix, ValidationError


@dataclass
class SummaryNode:
    """One node; ``var``/``threshold`` are None for leaves. Rows with
    ``x[var] <= threshold`` go left."""

    depth: int
    n: int
    share: float
    mean: float
    sse: float
    var: str | None = None
    column: int = -1
    threshold: float | None = None
    left: "SummaryNode | None" = None
    right: "SummaryNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.var is None

    def to_dict(self) -> dict:
        out = {"depth": self.depth, "n": self.n, "share": self.share, "mean": self.mean}
        if not self.is_leaf:
            out.update(var=self.var, threshold=self.threshold,
                       left=self.left.to_dict(), right=self.right.to_dict())
        return out


@dataclass
class SummaryTree:
    root: SummaryNode
    names: list[str]
    max_depth: int
    min_leaf: int

    def nodes(self) -> list[SummaryNode]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            out.append(node)
            if not node.is_leaf:
                stack.extend([node.right, node.left])
        return out

    def leaves(self, depth: int | None = None) -> list[SummaryNode]:
        """Leaves of the tree truncated at ``depth`` (the full tree by default)."""
        cap = math.inf if depth is None else depth
        return [nd for nd in self.nodes()
                if nd.depth <= cap and (nd.is_leaf or nd.depth == cap)]

    def loss(self, depth: int | None = None) -> float:
        """Training sum of squared deviations of the (truncated) tree."""
        return float(sum(nd.sse for nd in self.leaves(depth)))

    @property
    def first_split(self) -> str | None:
        return self.root.var

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, float)
        out = np.empty(X.shape[0])
        for i, row in enumerate(X):
            node = self.root
            while not node.is_leaf:
                node = node.left if row[node.column] <= node.threshold else node.right
            out[i] = node.mean
        return out

    def to_dict(self) -> dict:
        return {"max_depth": self.max_depth, "min_leaf": self.min_leaf, "root": self.root.to_dict()}

    def to_text(self) -> str:
        lines = []

        def walk(node, label, indent):
            lines.append(f"{'  ' * indent}{label}: mean={node.mean:.4g} "
                         f"share={100 * node.share:.1f}% n={node.n}")
            if not node.is_leaf:
                t = f"{node.threshold:.6g}"
                walk(node.left, f"{node.var} <= {t}", indent + 1)
                walk(node.right, f"{node.var} > {t}", indent + 1)

        walk(self.root, "all", 0)
        return "\n".join(lines) + "\n"


def default_min_leaf(n: int) -> int:
    return max(25, math.ceil(n / 40))


def _sse(v: np.ndarray) -> float:
    return float(np.sum((v - v.mean()) ** 2)) if v.size else 0.0


def best_split(x: np.ndarray, y: np.ndarray, min_leaf: int) -> tuple[float, float | None]:
    """Largest SSE reduction over all midpoints between distinct values of x
    that leave ``min_leaf`` rows on each side; returns (gain, threshold)."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = ys.size
    # center first so the running sums stay well conditioned
    yc = ys - ys.mean()
    cs = np.cumsum(yc)
    cs2 = np.cumsum(yc * yc)
    total, total2 = cs[-1], cs2[-1]
    k = np.arange(1, n)  # left size
    ok = (xs[1:] > xs[:-1]) & (k >= min_leaf) & (n - k >= min_leaf)
    if not ok.any():
        return 0.0, None
    left = cs2[:-1] - cs[:-1] ** 2 / k
    right = (total2 - cs2[:-1]) - (total - cs[:-1]) ** 2 / (n - k)
    parent = total2 - total ** 2 / n
    gain = np.where(ok, parent - left - right, -np.inf)
    i = int(np.argmax(gain))
    return float(gain[i]), float(0.5 * (xs[i] + xs[i + 1]))


def fit_summary_tree(X, tau_hat, max_depth: int = 3, min_leaf: int | None = None,
                     names: list[str] | None = None) -> SummaryTree:
    """Greedy regression tree on posterior-mean CATEs.

    Parameters
    ----------
    X : (n, p) array or :class:`DesignMatrix` (names are taken from it).
    tau_hat : (n,) point estimates.
    max_depth : maximum depth (root is depth 0).
    min_leaf : minimum rows per child; defaults to ``max(25, n/40)``.

    Splits maximize the reduction in within-node sum of squares, searching
    every midpoint between distinct values of every column. Growth stops at
    ``max_depth``, when no split respects ``min_leaf``, or when the best gain
    is zero.
    """
    if isinstance(X, DesignMatrix):
        names = names or X.names
        X = X.values
    X = np.asarray(X, float)
    y = np.asarray(tau_hat, float).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValidationError("X rows and tau_hat length must match")
    n = y.size
    if max_depth < 1:
        raise ValidationError("max_depth must be >= 1")
    min_leaf = default_min_leaf(n) if min_leaf is None else int(min_leaf)
    if min_leaf < 1:
        raise ValidationError("min_leaf must be >= 1")
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(X.shape[1])]
    tol = 1e-12 * max(_sse(y), 1e-300)

    def grow(rows, depth):
        v = y[rows]
        node = SummaryNode(depth, int(rows.size), rows.size / n, float(v.mean()), _sse(v))
        if depth >= max_depth or rows.size < 2 * min_leaf:
            return node
        best = (tol, -1, None)
        for j in range(X.shape[1]):
            gain, thr = best_split(X[rows, j], v, min_leaf)
            if thr is not None and gain > best[0]:
                best = (gain, j, thr)
        _, j, thr = best
        if j < 0:
            return node
        go_left = X[rows, j] <= thr
        node.var, node.column, node.threshold = names[j], j, thr
        node.left = grow(rows[go_left], depth + 1)
        node.right = grow(rows[~go_left], depth + 1)
        return node

    return SummaryTree(grow(np.arange(n), 0), names, max_depth, min_leaf)


@dataclass
class Contrast:
    """Posterior of ``ATE(S1) - ATE(S2)``."""

    draws: np.ndarray
    mean: float
    lower: float
    upper: float
    prob_positive: float
    sizes: tuple[int, int] = field(default=(0, 0))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "lower": self.lower, "upper": self.upper,
                "prob_positive": self.prob_positive, "n_draws": int(self.draws.size),
                "size_1": self.sizes[0], "size_2": self.sizes[1]}

    def histogram(self, bins: int = 30) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.draws, bins=bins)


def _rows(rows, n: int) -> np.ndarray:
    idx = np.asarray(rows)
    if idx.dtype == bool:
        if idx.size != n:
            raise ValidationError("boolean subgroup mask has the wrong length")
        idx = np.flatnonzero(idx)
    if idx.size == 0:
        raise ValidationError("subgroup is empty")
    return idx.astype(np.int64)


def subgroup_contrast(draws, S1, S2) -> Contrast:
    """Per-draw difference of subgroup mean CATEs.

    ``draws`` is a (draws, n) array or any object with such a ``tau``
    attribute. ``prob_positive`` counts strictly positive differences.
    """
    tau = np.asarray(getattr(draws, "tau", draws), float)
    if tau.ndim != 2:
        raise ValidationError("tau draws must be (draws, n)")
    a, b = _rows(S1, tau.shape[1]), _rows(S2, tau.shape[1])
    diff = tau[:, a].mean(axis=1) - tau[:, b].mean(axis=1)
    return Contrast(diff, float(diff.mean()), float(percentile(diff, 2.5)),
                    float(percentile(diff, 97.5)), float(np.mean(diff > 0)), (a.size, b.size))
