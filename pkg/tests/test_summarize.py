import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bcforest.bcf import BcfConfig, fit_bcf
from bcforest.data import ValidationError, design_matrix
from bcforest.dgp import gen_sim_study
from bcforest.summarize import (best_split, default_min_leaf, fit_summary_tree,
                                subgroup_contrast)


def test_constant_cates_give_root_only():
    X = np.random.default_rng(0).normal(size=(100, 3))
    tree = fit_summary_tree(X, np.full(100, 2.5), max_depth=3, min_leaf=1)
    assert tree.root.is_leaf and tree.first_split is None
    assert tree.root.mean == 2.5 and tree.root.share == 1.0


def test_step_is_recovered_exactly():
    x = np.linspace(0.05, 0.95, 10)  # midpoint between the two middle values is 0.5
    X = np.column_stack([x, np.random.default_rng(1).normal(size=10)])
    tau = np.where(x <= 0.5, -1.0, 2.0)
    tree = fit_summary_tree(X, tau, max_depth=3, min_leaf=1)
    assert tree.first_split == "x1"
    assert tree.root.threshold == pytest.approx(0.5)
    assert tree.root.left.is_leaf and tree.root.right.is_leaf
    assert tree.root.left.mean == -1.0 and tree.root.right.mean == 2.0
    assert tree.loss() == 0.0
    assert np.array_equal(tree.predict(X), tau)


def test_root_only_when_too_few_rows():
    X = np.arange(30.0)[:, None]
    tree = fit_summary_tree(X, X[:, 0], max_depth=2)  # min_leaf defaults to 25
    assert default_min_leaf(30) == 25
    assert tree.root.is_leaf


def test_validation():
    with pytest.raises(ValidationError):
        fit_summary_tree(np.zeros((4, 1)), np.zeros(3))
    with pytest.raises(ValidationError):
        fit_summary_tree(np.zeros((4, 1)), np.zeros(4), max_depth=0)
    with pytest.raises(ValidationError):
        fit_summary_tree(np.zeros((4, 1)), np.zeros(4), min_leaf=0)


def test_best_split_brute_force():
    rng = np.random.default_rng(2)
    x = rng.integers(0, 8, 40).astype(float)
    y = rng.normal(size=40)
    gain, thr = best_split(x, y, 3)

    def sse(v):
        return ((v - v.mean()) ** 2).sum() if v.size else 0.0

    best = max(((sse(y) - sse(y[x <= t]) - sse(y[x > t]), t)
                for t in (np.unique(x)[:-1] + np.unique(x)[1:]) / 2
                if min((x <= t).sum(), (x > t).sum()) >= 3))
    assert gain == pytest.approx(best[0]) and thr == best[1]


tree_inputs = st.tuples(st.integers(0, 10_000), st.integers(20, 120), st.integers(1, 15))


@settings(max_examples=40, deadline=None)
@given(tree_inputs)
def test_partition_shares_and_monotone_loss(args):
    seed, n, min_leaf = args
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    tau = X[:, 0] * (X[:, 1] > 0) + 0.3 * rng.normal(size=n)
    tree = fit_summary_tree(X, tau, max_depth=4, min_leaf=min_leaf)
    losses = [tree.loss(d) for d in range(5)]
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
    for d in range(5):
        leaves = tree.leaves(d)
        assert sum(nd.n for nd in leaves) == n
        assert sum(nd.share for nd in leaves) == pytest.approx(1.0)
    for nd in tree.nodes():
        if not nd.is_leaf:
            assert nd.left.n + nd.right.n == nd.n
            assert min(nd.left.n, nd.right.n) >= min_leaf
    # predictions are the leaf means of the training rows
    pred = tree.predict(X)
    for value in np.unique(pred):
        assert value == pytest.approx(tau[pred == value].mean())


def test_text_and_dict_render():
    x = np.linspace(0, 1, 60)
    tree = fit_summary_tree(np.column_stack([x]), (x > 0.5).astype(float), max_depth=1,
                            names=["dose"])
    text = tree.to_text()
    assert text.splitlines()[1].strip().startswith("dose <= ")
    d = tree.to_dict()
    assert d["root"]["var"] == "dose" and d["root"]["left"]["n"] + d["root"]["right"]["n"] == 60


def test_design_matrix_names_are_used():
    s = gen_sim_study(300, seed=0)
    dm = design_matrix(s.X, s.kinds)
    tree = fit_summary_tree(dm, s.true_tau, max_depth=2)
    assert tree.first_split in ("x2", "x4")


# ---------------------------------------------------------------- contrasts


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_contrast_identities(seed):
    rng = np.random.default_rng(seed)
    draws = rng.normal(size=(50, 30))
    a = rng.random(30) < 0.5
    a[0], a[1] = True, False
    b = ~a
    same = subgroup_contrast(draws, a, a)
    assert np.all(same.draws == 0.0) and same.prob_positive == 0.0
    ab, ba = subgroup_contrast(draws, a, b), subgroup_contrast(draws, b, a)
    assert np.array_equal(ab.draws, -ba.draws)
    assert ab.mean == pytest.approx(-ba.mean)
    idx = subgroup_contrast(draws, np.flatnonzero(a), np.flatnonzero(b))
    assert np.array_equal(idx.draws, ab.draws)
    assert ab.sizes == (a.sum(), b.sum())


def test_contrast_recomputation_oracle():
    rng = np.random.default_rng(3)
    draws = rng.normal(size=(200, 40))
    s1, s2 = np.arange(10), np.arange(20, 40)
    c = subgroup_contrast(draws, s1, s2)
    diff = np.array([row[:10].sum() / 10 - row[20:].sum() / 20 for row in draws])
    assert np.max(np.abs(c.draws - diff)) < 1e-12
    srt = np.sort(diff)
    assert c.lower == pytest.approx(srt[4] + (srt[5] - srt[4]) * 0.975, abs=1e-12)
    assert c.prob_positive == np.mean(diff > 0)
    counts, edges = c.histogram(10)
    assert counts.sum() == 200 and edges.size == 11


def test_contrast_errors():
    draws = np.zeros((5, 4))
    with pytest.raises(ValidationError):
        subgroup_contrast(draws, np.zeros(4, bool), np.ones(4, bool))
    with pytest.raises(ValidationError):
        subgroup_contrast(draws, np.ones(3, bool), np.ones(4, bool))
    with pytest.raises(ValidationError):
        subgroup_contrast(np.zeros(4), [0], [1])


def test_null_contrast_straddles_zero():
    """Disjoint halves of a homogeneous-effect fit: the interval covers 0."""
    straddle = 0
    reps = 20
    for rep in range(reps):
        s = gen_sim_study(250, "homogeneous", "linear", seed=400 + rep)
        d = fit_bcf(s.dataset(), BcfConfig(iterations=600, burn_in=300, seed=rep,
                                           propensity_source="logistic"))
        half = np.random.default_rng(rep).permutation(s.n) < s.n // 2
        c = subgroup_contrast(d, half, ~half)
        straddle += c.lower <= 0 <= c.upper
    assert straddle >= 0.9 * reps
