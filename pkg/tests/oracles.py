"""Reference computations written independently of the package internals."""

from __future__ import annotations

import math

import numpy as np
from scipy import stats

from bcforest.data import CutpointGrid, build_cutpoints, design_matrix
from bcforest.forest import Component, Forest, SamplerState, TreePrior


def enumerate_trees(ncuts, eta, beta, depth=0, lo=None, hi=None):
    """Every tree on the grid as ``(key, log_prior)``; keys match ``Tree.key()``."""
    ncuts = list(ncuts)
    lo = [0] * len(ncuts) if lo is None else lo
    hi = list(ncuts) if hi is None else hi
    avail = [j for j in range(len(ncuts)) if hi[j] > lo[j]]
    if not avail:
        return [((), 0.0)]
    p = eta * (1.0 + depth) ** (-beta)
    out = [((), math.log(1.0 - p))]
    for j in avail:
        for c in range(lo[j], hi[j]):
            base = math.log(p) - math.log(len(avail)) - math.log(hi[j] - lo[j])
            lh = list(hi)
            lh[j] = c
            rl = list(lo)
            rl[j] = c + 1
            for lk, lp in enumerate_trees(ncuts, eta, beta, depth + 1, lo, lh):
                for rk, rp in enumerate_trees(ncuts, eta, beta, depth + 1, rl, hi):
                    out.append(((j, c, lk, rk), base + lp + rp))
    return out


def leaf_membership(key, bins) -> np.ndarray:
    """(n, leaves) 0/1 matrix for a tree key; rows with ``bins[j] <= c`` go left."""
    n = bins.shape[1]
    cols = []

    def walk(k, rows):
        if k == ():
            cols.append(rows.astype(float))
            return
        j, c, lk, rk = k
        go_left = bins[j] <= c
        walk(lk, rows & go_left)
        walk(rk, rows & ~go_left)

    walk(key, np.ones(n, bool))
    return np.column_stack(cols)


def exact_tree_posterior(y, bins, ncuts, eta, beta, sigma, sigma_m):
    """Posterior over topologies: prior times the Gaussian marginal
    ``y ~ N(0, sigma^2 I + sigma_m^2 B B')``."""
    trees = enumerate_trees(ncuts, eta, beta)
    logs = []
    for key, lp in trees:
        B = leaf_membership(key, bins)
        cov = sigma ** 2 * np.eye(len(y)) + sigma_m ** 2 * B @ B.T
        logs.append(lp + stats.multivariate_normal(np.zeros(len(y)), cov).logpdf(y))
    logs = np.array(logs)
    w = np.exp(logs - logs.max())
    return {key: float(p) for (key, _), p in zip(trees, w / w.sum())}


def tiny_instance():
    """Four rows, one column, two cutpoints: every tree has depth at most 2."""
    x = np.array([[0.0], [0.0], [1.0], [2.0]])
    dm = design_matrix_from_array(x)
    grid = build_cutpoints(dm)
    y = np.array([-1.1, -0.7, 0.6, 1.9])
    return y, grid.bin(dm.values), grid.ncuts


def design_matrix_from_array(x):
    import pandas as pd
    from bcforest.data import ColumnKind
    frame = pd.DataFrame({f"c{j}": x[:, j] for j in range(x.shape[1])})
    return design_matrix(frame, {c: ColumnKind.continuous() for c in frame.columns})


def run_single_tree_chain(y, bins, ncuts, prior, sigma, iters, seed, use_likelihood=True):
    """Topology key after every MH step of a one-tree model with fixed sigma."""
    rng = np.random.default_rng(seed)
    comp = Component(Forest(prior), bins, ncuts, np.ones(len(y)))
    state = SamplerState(np.asarray(y, float).copy(), [comp], sigma, rng)
    tree = comp.forest.tree(0)
    keys = []
    for _ in range(iters):
        comp.update_tree(0, state.resid, sigma, rng, use_likelihood)
        keys.append(tree.key())
    return keys


def batch_means_se(indicator: np.ndarray, batches: int = 100) -> float:
    """Monte-Carlo standard error of a chain average by non-overlapping batch means."""
    m = indicator.size // batches
    means = indicator[: m * batches].reshape(batches, m).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(batches))


def unbounded_depth_pmf(eta, beta, max_depth=40):
    """Distribution of the maximum leaf depth when rules never run out.

    ``F[h]`` is the probability that a subtree rooted at depth h stays within
    depth d; ``F[h] = (1 - p_h) + p_h F[h+1]^2``.
    """
    def p(h):
        return eta * (1.0 + h) ** (-beta)

    cdf = []
    for d in range(max_depth + 1):
        F = 1.0 - p(d)
        for h in range(d - 1, -1, -1):
            F = (1.0 - p(h)) + p(h) * F * F
        cdf.append(F)
    cdf = np.array(cdf)
    return np.diff(np.r_[0.0, cdf])


def tree_shape(key) -> tuple[int, int]:
    """(max depth, leaf count) of a tree key."""
    if key == ():
        return 0, 1
    ld, ll = tree_shape(key[2])
    rd, rl = tree_shape(key[3])
    return 1 + max(ld, rd), ll + rl


def exact_shape_pmfs(ncuts, eta, beta):
    """Exact prior pmfs of max depth and leaf count on a finite cutpoint grid."""
    depth, leaves = {}, {}
    for key, lp in enumerate_trees(ncuts, eta, beta):
        d, k = tree_shape(key)
        depth[d] = depth.get(d, 0.0) + math.exp(lp)
        leaves[k] = leaves.get(k, 0.0) + math.exp(lp)

    def dense(m):
        out = np.zeros(max(m) + 1)
        for k, v in m.items():
            out[k] = v
        return out

    return dense(depth), dense(leaves)


def prior_chain_shapes(eta, beta, ncuts=3, num_trees=1000, kept=100, thin=50, burn=100,
                       seed=0):
    """(max depth, leaf count) of every tree in a likelihood-free chain on one
    column with ``ncuts`` cutpoints, recorded every ``thin`` sweeps."""
    rng = np.random.default_rng(seed)
    grid = CutpointGrid((np.arange(ncuts, dtype=float) + 0.5,))
    n = ncuts + 1
    bins = grid.bin(np.arange(n, dtype=float)[:, None])
    comp = Component(Forest(TreePrior(eta, beta, num_trees, 1.0)), bins, grid.ncuts, np.ones(n))
    resid = np.zeros(n)
    f = comp.forest
    depths, leaves = [], []
    for s in range(burn + kept * thin):
        comp.sweep(resid, 1.0, rng, use_likelihood=False)
        if s >= burn and (s - burn) % thin == thin - 1:
            leaf = (f.active == 1) & (f.var < 0)
            depths.append(np.where(leaf, f.depth, -1).max(axis=1))
            leaves.append(leaf.sum(axis=1))
    return np.concatenate(depths), np.concatenate(leaves)


def chi2_against(counts: np.ndarray, probs: np.ndarray, min_expected: float = 5.0):
    """Chi-square goodness of fit, pooling the upper tail until expected counts reach
    ``min_expected``."""
    total = counts.sum()
    exp = probs * total
    k = len(exp)
    while k > 1 and exp[k - 1:].sum() < min_expected:
        k -= 1
    obs = np.r_[counts[: k - 1], counts[k - 1:].sum()]
    ex = np.r_[exp[: k - 1], exp[k - 1:].sum()]
    keep = ex > 0
    return stats.chisquare(obs[keep], ex[keep] * obs[keep].sum() / ex[keep].sum())
