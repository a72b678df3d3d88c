import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from bcforest.bcf import (BcfConfig, ScalePrior, counterfactual_tau, fit_bcf, percentile,
                          scale_log_conditional, slice_sample, summarize_tau)
from bcforest.data import CutpointGrid, Dataset, ValidationError
from bcforest.dgp import gen_sim_study
from bcforest.forest import BartConfig, TreePrior, fit_bart, sample_prior_tree

FAST = dict(iterations=600, burn_in=300, propensity_source="logistic")


def _chain(logf, x0, n, seed):
    rng = np.random.default_rng(seed)
    out = np.empty(n)
    x = x0
    for i in range(n):
        x = slice_sample(logf, x, rng)
        out[i] = x
    return out


def test_scale_prior_medians():
    cfg = BcfConfig()
    rng = np.random.default_rng(0)
    assert cfg.mu_scale_prior.median() == pytest.approx(2.0)
    assert cfg.tau_scale_prior.median() == pytest.approx(1.0)
    assert abs(np.median(cfg.mu_scale_prior.sample(rng, 100_000)) / 2.0 - 1) < 0.05
    assert abs(np.median(cfg.tau_scale_prior.sample(rng, 100_000)) - 1) < 0.05


@pytest.mark.parametrize("prior,median", [(BcfConfig().mu_scale_prior, 2.0),
                                          (BcfConfig().tau_scale_prior, 1.0)])
def test_slice_sampler_reproduces_prior_when_h_is_zero(prior, median):
    draws = _chain(scale_log_conditional(prior, 0.0, 0.0, 1.0), median, 100_000, seed=1)
    assert abs(np.median(draws) / median - 1) < 0.05


@pytest.mark.parametrize("family", ["half-cauchy", "half-normal"])
def test_slice_sampler_matches_integrated_density(family):
    prior = ScalePrior(family, 1.3)
    a, b, sigma = 6.0, 4.0, 1.5
    logf = scale_log_conditional(prior, a, b, sigma)
    draws = _chain(logf, 0.5, 50_000, seed=2)
    edges = np.linspace(0, np.quantile(draws, 0.999), 31)
    norm, _ = integrate.quad(lambda s: math.exp(logf(s)), 0, np.inf)
    mass = np.array([integrate.quad(lambda s: math.exp(logf(s)), lo, hi)[0]
                     for lo, hi in zip(edges[:-1], edges[1:])]) / norm
    mass = np.r_[mass, 1 - mass.sum()]
    counts = np.histogram(draws, bins=np.r_[edges, np.inf])[0] / draws.size
    assert 0.5 * np.abs(counts - mass).sum() < 0.02


def test_scale_concentrates_at_least_squares_when_sigma_small():
    rng = np.random.default_rng(3)
    u = rng.normal(size=40)
    r = 0.8 * u + 1e-3 * rng.normal(size=40)
    logf = scale_log_conditional(ScalePrior("half-normal", 1.0), u @ u, r @ u, 1e-4)
    ls = (r @ u) / (u @ u)
    x = _chain(logf, ls, 200, seed=4)
    assert np.all(np.abs(x - ls) < 1e-3)


def test_tau_prior_has_mostly_root_trees():
    """P(no split) per tree is 1 - eta = 0.75; the all-root forest fraction is 0.75^L."""
    prior = TreePrior(0.25, 3.0, 3)
    grid = CutpointGrid((np.arange(20) + 0.5, np.arange(20) + 0.5))
    rng = np.random.default_rng(5)
    n = 20_000
    roots = np.array([[sample_prior_tree(prior, grid, rng).n_leaves == 1 for _ in range(3)]
                      for _ in range(n)])
    se = math.sqrt(0.75 * 0.25 / (3 * n))
    assert abs(roots.mean() - 0.75) < 4 * se
    se_all = math.sqrt(0.75 ** 3 * (1 - 0.75 ** 3) / n)
    assert abs(roots.all(axis=1).mean() - 0.75 ** 3) < 4 * se_all


# ---------------------------------------------------------------- fits


@pytest.fixture(scope="module")
def hetero_fit():
    s = gen_sim_study(200, "heterogeneous", "linear", seed=3)
    return s, fit_bcf(s.dataset(), BcfConfig(chains=2, check_invariants=True, **FAST))


def test_bcf_invariants(hetero_fit):
    s, d = hetero_fit
    assert d.tau.shape == (600, 200) and d.mu.shape == (600, 200)
    assert d.fit_error.max() < 1e-8
    assert d.resid_error.max() < 1e-10
    assert np.all(d.sigma > 0) and np.all(d.s_mu > 0) and np.all(d.s_tau > 0)
    # control units carry tau(x) too; the treated-only basis does not zero it
    assert np.abs(d.tau[:, s.z == 0]).max() > 0
    assert d.accept["mu_grow_accepted"] > 0 and d.accept["tau_grow_proposed"] > 0


def test_bcf_recovers_heterogeneity(hetero_fit):
    s, d = hetero_fit
    cate = d.tau.mean(axis=0)
    assert np.corrcoef(cate, s.true_tau)[0, 1] > 0.7
    assert abs(cate.mean() - s.true_tau.mean()) < 0.5


def test_bcf_deterministic_and_jobs_invariant():
    s = gen_sim_study(120, "homogeneous", "linear", seed=8)
    cfg = BcfConfig(iterations=200, burn_in=100, chains=2, seed=4)
    a = fit_bcf(s.dataset(), cfg)
    b = fit_bcf(s.dataset(), cfg, jobs=2)
    for name in ("tau", "mu", "sigma", "s_mu", "s_tau", "pi_hat"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_bcf_validation(tmp_path):
    s = gen_sim_study(50, seed=1)
    ds = s.dataset()
    with pytest.raises(ValidationError):
        fit_bcf(ds.subset(np.flatnonzero(ds.z == 1)), BcfConfig(**FAST))
    with pytest.raises(ValidationError):
        fit_bcf(ds, BcfConfig(iterations=10, burn_in=10))
    with pytest.raises(ValidationError):
        fit_bcf(ds, BcfConfig(propensity_source="oracle"))
    with pytest.raises(OSError):
        fit_bcf(ds, BcfConfig(iterations=20, burn_in=10, propensity_source="file"))
    with pytest.raises(OSError):
        fit_bcf(ds, BcfConfig(iterations=20, burn_in=10, propensity_source="file",
                              propensity_file=str(tmp_path / "missing.csv")))


def test_bcf_reads_propensity_file(tmp_path):
    s = gen_sim_study(60, seed=2)
    path = tmp_path / "pi.csv"
    path.write_text("pi_hat\n" + "\n".join(f"{p:.17g}" for p in s.true_pi) + "\n")
    d = fit_bcf(s.dataset(), BcfConfig(iterations=20, burn_in=10, propensity_source="file",
                                       propensity_file=str(path)))
    assert np.array_equal(d.pi_hat, s.true_pi)


def test_bcf_null_effect():
    hits = 0
    for rep in range(20):
        s = gen_sim_study(250, "none", "nonlinear", seed=100 + rep)
        d = fit_bcf(s.dataset(), BcfConfig(seed=rep, **FAST))
        hits += abs(d.tau.mean()) < 0.1 * np.std(s.y, ddof=1)
    assert hits >= 16


def test_homogeneous_effect_shrinks_cate_spread():
    spreads = {}
    for effect in ("homogeneous", "heterogeneous"):
        vals = []
        for rep in range(3):
            s = gen_sim_study(250, effect, "linear", seed=200 + rep)
            d = fit_bcf(s.dataset(), BcfConfig(seed=rep, **FAST))
            vals.append(d.tau.mean(axis=0).std())
        spreads[effect] = np.mean(vals)
    assert spreads["homogeneous"] < spreads["heterogeneous"]


def test_bart_null_coverage():
    rng = np.random.default_rng(0)
    cover = 0
    for rep in range(50):
        s = gen_sim_study(200, "none", "linear", seed=300 + rep)
        y = rng.normal(size=200)  # outcome independent of x and z
        ds = Dataset(y, s.z, s.X, dict(s.kinds))
        d = fit_bart(ds, BartConfig(num_trees=50, iterations=600, burn_in=300, seed=rep))
        lo, hi = summarize_tau(d.tau).ate_interval
        cover += lo <= 0 <= hi
    assert cover >= 45


# ---------------------------------------------------------------- summaries


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 5), st.floats(0, 100), st.integers(0, 1000))
def test_percentile_matches_sort_oracle(m, n, q, seed):
    a = np.random.default_rng(seed).normal(size=(m, n))
    s = np.sort(a, axis=0)
    pos = (m - 1) * q / 100
    lo = int(math.floor(pos))
    hi = min(lo + 1, m - 1)
    oracle = s[lo] + (s[hi] - s[lo]) * (pos - lo)
    assert np.array_equal(percentile(a, q), oracle)
    assert np.allclose(percentile(a, q), np.percentile(a, q, axis=0), rtol=0, atol=1e-12)


def test_cate_summary_cases():
    tau = np.array([[1.0, 2.0, 3.0]])
    c = summarize_tau(tau)
    assert np.array_equal(c.lower, tau[0]) and np.array_equal(c.upper, tau[0])
    draws = np.random.default_rng(0).normal(size=(100, 7))
    c = summarize_tau(draws)
    assert np.array_equal(c.subgroup_draws(np.ones(7, bool)), c.ate_draws)
    with pytest.raises(ValidationError):
        c.subgroup_draws(np.zeros(7, bool))
    with pytest.raises(ValidationError):
        summarize_tau(np.empty((0, 3)))


def test_counterfactual_tau_uses_draws(hetero_fit):
    _, d = hetero_fit
    c = counterfactual_tau(d)
    assert np.array_equal(c.mean, d.tau.mean(axis=0))
    assert np.all(c.lower <= c.mean) and np.all(c.mean <= c.upper)
