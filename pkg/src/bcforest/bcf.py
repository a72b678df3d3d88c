"""Bayesian causal forests: ``E(y | x, z) = mu(x, pi_hat(x)) + tau(x) z``.

Both functions get BART priors, fitted by backfitting on the standardized
outcome. Each forest is parameter-expanded as ``s * h(x)`` with unit-scale
leaves for ``h``; the scale ``s`` carries a half-Cauchy prior for the
prognostic forest and a half-Normal prior for the treatment forest and is
updated by slice sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (Dataset, DesignMatrix, ValidationError, build_cutpoints, design_matrix,
                   read_vector, standardize)
from .forest.sampler import (Component, Forest, SamplerState, _map_chains,
                             calibrate_sigma_prior, chain_seeds, fit_probit_bart,
                             residual_sd, update_sigma, BartConfig, PROBIT_CONFIG)
from .forest.tree import DEFAULT_CAPACITY, TreePrior

HALF_NORMAL_MEDIAN = 0.6744897501960817  # median of |N(0, 1)|


@dataclass(frozen=True)
class BcfConfig:
    """BCF settings. Scale-prior medians are in units of sd(y)."""

    mu_trees: int = 200
    mu_eta: float = 0.95
    mu_beta: float = 2.0
    tau_trees: int = 50
    tau_eta: float = 0.25
    tau_beta: float = 3.0
    mu_scale_median: float = 2.0
    tau_scale_median: float = 1.0
    nu: float = 3.0
    q: float = 0.9
    iterations: int = 2000
    burn_in: int = 1000
    chains: int = 1
    seed: int = 0
    max_cuts: int = 100
    capacity: int = DEFAULT_CAPACITY
    propensity_source: str = "internal"
    propensity_file: str | None = None
    propensity_config: BartConfig = PROBIT_CONFIG
    check_invariants: bool = False

    def validate(self):
        TreePrior(self.mu_eta, self.mu_beta, self.mu_trees)
        TreePrior(self.tau_eta, self.tau_beta, self.tau_trees)
        if self.burn_in < 0 or self.iterations <= self.burn_in:
            raise ValidationError("iterations must exceed burn_in >= 0")
        if self.chains < 1:
            raise ValidationError("chains must be >= 1")
        if self.propensity_source not in ("internal", "logistic", "file"):
            raise ValidationError(f"unknown propensity source {self.propensity_source!r}")
        if self.mu_scale_median <= 0 or self.tau_scale_median <= 0:
            raise ValidationError("scale-prior medians must be positive")
        return self

    @property
    def kept(self) -> int:
        return self.iterations - self.burn_in

    @property
    def mu_scale_prior(self) -> "ScalePrior":
        # the median of a half-Cauchy(0, A) is A
        return ScalePrior("half-cauchy", self.mu_scale_median)

    @property
    def tau_scale_prior(self) -> "ScalePrior":
        return ScalePrior("half-normal", self.tau_scale_median / HALF_NORMAL_MEDIAN)


@dataclass(frozen=True)
class ScalePrior:
    """Half-Cauchy or half-Normal prior on a positive scale, in standardized units."""

    family: str
    scale: float

    def logpdf(self, s: float) -> float:
        if s <= 0:
            return -math.inf
        u = s / self.scale
        if self.family == "half-cauchy":
            return -math.log1p(u * u)
        return -0.5 * u * u

    def median(self) -> float:
        return self.scale if self.family == "half-cauchy" else self.scale * HALF_NORMAL_MEDIAN

    def sample(self, rng: np.random.Generator, size=None):
        if self.family == "half-cauchy":
            return np.abs(self.scale * rng.standard_cauchy(size))
        return np.abs(self.scale * rng.standard_normal(size))


def slice_sample(logf, x0: float, rng: np.random.Generator, width: float = 1.0,
                 max_steps: int = 100) -> float:
    """Univariate slice sampling with stepping out and shrinkage."""
    log_y = logf(x0) + math.log(rng.random())
    left = x0 - width * rng.random()
    right = left + width
    j = int(max_steps * rng.random())
    k = max_steps - 1 - j
    while j > 0 and logf(left) > log_y:
        left -= width
        j -= 1
    while k > 0 and logf(right) > log_y:
        right += width
        k -= 1
    while True:
        x1 = left + (right - left) * rng.random()
        if logf(x1) > log_y:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1


def scale_log_conditional(prior: ScalePrior, a: float, b: float, sigma: float):
    """Log full conditional of ``s`` (up to a constant) when the partial
    residual ``r`` is modeled as ``N(s * u, sigma^2)`` with ``a = sum u^2`` and
    ``b = sum r u``."""
    inv = 1.0 / (2.0 * sigma * sigma)

    def logf(s):
        lp = prior.logpdf(s)
        if lp == -math.inf:
            return lp
        return lp - (a * s * s - 2.0 * b * s) * inv

    return logf


@dataclass
class BcfState(SamplerState):
    """Chain state: components ``[mu, tau]`` plus their scales."""

    s_mu: float = 1.0
    s_tau: float = 1.0
    z: np.ndarray = None

    @property
    def mu(self) -> Component:
        return self.components[0]

    @property
    def tau(self) -> Component:
        return self.components[1]


def update_leaf_scale(component: str, state: BcfState, prior: ScalePrior,
                      rng: np.random.Generator | None = None) -> BcfState:
    """Slice-sample the scale of the ``mu`` or ``tau`` forest given everything else."""
    rng = rng or state.rng
    if component == "mu":
        comp, s_old, basis = state.mu, state.s_mu, 1.0
    elif component == "tau":
        comp, s_old, basis = state.tau, state.s_tau, state.z
    else:
        raise ValidationError(f"unknown component {component!r}")
    u = basis * comp.fit
    partial = state.resid + s_old * u
    a = float(u @ u)
    b = float(partial @ u)
    s_new = slice_sample(scale_log_conditional(prior, a, b, state.sigma), s_old, rng)
    comp.set_weights(s_new * basis * np.ones_like(state.resid), state.resid)
    if component == "mu":
        state.s_mu = s_new
    else:
        state.s_tau = s_new
    return state


@dataclass
class BcfDraws:
    """Kept draws in raw outcome units, stacked over chains.

    ``tau`` and ``mu`` are (draws, n); ``mu`` is the prognostic function at
    each unit's own (x, pi_hat). ``fit_error`` records, per draw, the largest
    gap between ``mu + tau z`` and the sampler's cached fit (standardized).
    """

    tau: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    s_mu: np.ndarray
    s_tau: np.ndarray
    chain: np.ndarray
    iteration: np.ndarray
    z: np.ndarray
    y_mean: float
    y_sd: float
    pi_hat: np.ndarray
    fit_error: np.ndarray
    resid_error: np.ndarray | None = None
    accept: dict = field(default_factory=dict)

    @property
    def num_draws(self) -> int:
        return self.tau.shape[0]

    def fitted(self) -> np.ndarray:
        return self.mu + self.tau * self.z

    @staticmethod
    def concat(parts: list["BcfDraws"]) -> "BcfDraws":
        first = parts[0]

        def cat(name):
            vals = [getattr(p, name) for p in parts]
            return None if vals[0] is None else np.concatenate(vals)

        accept = {}
        for p in parts:
            for key, v in p.accept.items():
                accept[key] = accept.get(key, 0) + v
        return BcfDraws(cat("tau"), cat("mu"), cat("sigma"), cat("s_mu"), cat("s_tau"),
                        cat("chain"), cat("iteration"), first.z, first.y_mean, first.y_sd,
                        first.pi_hat, cat("fit_error"), cat("resid_error"), accept)


def estimate_propensity(ds: Dataset, config: BcfConfig, jobs: int = 1) -> np.ndarray:
    """pi_hat from the configured source: internal probit BART, logistic
    regression, or a file (or a pi_hat already on the dataset)."""
    source = config.propensity_source
    if source == "file":
        if config.propensity_file:
            return read_vector(config.propensity_file)
        if ds.pi_hat is None:
            raise OSError("propensity source 'file' but no pi_hat provided")
        return ds.pi_hat
    dm = design_matrix(ds.X, ds.kinds)
    if source == "logistic":
        return fit_logistic_propensity(dm, ds.z)
    pconf = replace(config.propensity_config, seed=config.seed)
    return fit_probit_bart(dm, ds.z, pconf, jobs=jobs).pi_hat


def fit_logistic_propensity(dm: DesignMatrix, z: np.ndarray) -> np.ndarray:
    from sklearn.linear_model import LogisticRegression

    model = LogisticRegression(C=1e6, max_iter=5000)
    model.fit(dm.values, z)
    return np.clip(model.predict_proba(dm.values)[:, 1], 0.001, 0.999)


def _run_bcf_chain(y_std, z, mu_bins, mu_ncuts, tau_bins, tau_ncuts, config, sigma_prior,
                   sigma_init, seed_seq, chain_id, y_mean, y_sd, pi_hat):
    rng = np.random.default_rng(seed_seq)
    n = y_std.shape[0]
    zf = z.astype(float)
    mu_prior = TreePrior.from_sigma0(1.0, config.mu_trees, config.mu_eta, config.mu_beta)
    tau_prior = TreePrior.from_sigma0(1.0, config.tau_trees, config.tau_eta, config.tau_beta)
    mu_sp, tau_sp = config.mu_scale_prior, config.tau_scale_prior
    s_mu, s_tau = mu_sp.median(), tau_sp.median()
    mu = Component(Forest(mu_prior, config.capacity), mu_bins, mu_ncuts, np.full(n, s_mu))
    tau = Component(Forest(tau_prior, config.capacity), tau_bins, tau_ncuts, s_tau * zf)
    state = BcfState(y_std.copy(), [mu, tau], sigma_init, rng, s_mu=s_mu, s_tau=s_tau, z=zf)
    kept = config.kept
    out = dict(tau=np.empty((kept, n)), mu=np.empty((kept, n)), sigma=np.empty(kept),
               s_mu=np.empty(kept), s_tau=np.empty(kept), fit_error=np.empty(kept))
    resid_error = np.empty(kept) if config.check_invariants else None
    for it in range(config.iterations):
        mu.sweep(state.resid, state.sigma, rng)
        update_leaf_scale("mu", state, mu_sp)
        tau.sweep(state.resid, state.sigma, rng)
        update_leaf_scale("tau", state, tau_sp)
        update_sigma(state, sigma_prior)
        k = it - config.burn_in
        if k >= 0:
            mu_std = state.s_mu * mu.fit
            tau_std = state.s_tau * tau.fit
            out["tau"][k] = tau_std
            out["mu"][k] = mu_std
            out["sigma"][k] = state.sigma
            out["s_mu"][k] = state.s_mu
            out["s_tau"][k] = state.s_tau
            out["fit_error"][k] = np.max(np.abs(mu_std + tau_std * zf - (y_std - state.resid)))
            if resid_error is not None:
                resid_error[k] = state.residual_error()
    accept = {}
    for name, comp in (("mu", mu), ("tau", tau)):
        for key, v in zip(("grow_proposed", "grow_accepted", "prune_proposed", "prune_accepted"),
                          comp.stats.tolist()):
            accept[f"{name}_{key}"] = v
    return BcfDraws(
        tau=y_sd * out["tau"], mu=y_mean + y_sd * out["mu"], sigma=y_sd * out["sigma"],
        s_mu=out["s_mu"], s_tau=out["s_tau"], chain=np.full(kept, chain_id),
        iteration=np.arange(config.burn_in, config.iterations), z=z, y_mean=y_mean, y_sd=y_sd,
        pi_hat=pi_hat, fit_error=out["fit_error"], resid_error=resid_error, accept=accept)


def fit_bcf(ds: Dataset, config: BcfConfig = BcfConfig(), jobs: int = 1) -> BcfDraws:
    """Fit a Bayesian causal forest.

    The prognostic forest splits on the covariates plus pi_hat; the
    treatment forest splits on the covariates only and enters through
    treated rows. If ``ds`` carries no pi_hat it is estimated first from
    ``config.propensity_source``.
    """
    config.validate()
    ds.require_both_arms()
    pi_hat = ds.pi_hat
    if pi_hat is None or config.propensity_source == "file" and config.propensity_file:
        pi_hat = estimate_propensity(ds, config, jobs)
        ds = ds.with_pi_hat(pi_hat)
    y_std, inverse = standardize(ds)
    x_dm = design_matrix(ds.X, ds.kinds)
    mu_dm = x_dm.append("pi_hat", pi_hat)
    mu_grid = build_cutpoints(mu_dm, config.max_cuts)
    tau_grid = build_cutpoints(x_dm, config.max_cuts)
    sigma_hat = residual_sd(y_std, np.column_stack([x_dm.values, ds.z]))
    sigma_prior = calibrate_sigma_prior(sigma_hat, config.nu, config.q)
    seeds = chain_seeds(config.seed, config.chains)
    args = [(y_std, ds.z, mu_grid.bin(mu_dm.values), mu_grid.ncuts, tau_grid.bin(x_dm.values),
             tau_grid.ncuts, config, sigma_prior, sigma_hat, s, c, inverse.shift, inverse.scale,
             pi_hat) for c, s in enumerate(seeds)]
    return BcfDraws.concat(_map_chains(_run_bcf_chain, args, jobs))


def percentile(draws: np.ndarray, q: float, axis: int = 0) -> np.ndarray:
    """Linear-interpolation percentile using partial selection rather than a full sort."""
    a = np.moveaxis(np.asarray(draws, dtype=float), axis, 0)
    m = a.shape[0]
    pos = (m - 1) * q / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, m - 1)
    part = np.partition(a, (lo, hi), axis=0)
    frac = pos - lo
    return part[lo] + (part[hi] - part[lo]) * frac


@dataclass
class CateSummary:
    """Per-unit posterior mean and 95% interval of tau(x_i), plus ATE draws."""

    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ate_draws: np.ndarray
    tau_draws: np.ndarray

    @property
    def ate(self) -> float:
        return float(self.ate_draws.mean())

    @property
    def ate_interval(self) -> tuple[float, float]:
        return (float(percentile(self.ate_draws, 2.5)), float(percentile(self.ate_draws, 97.5)))

    def subgroup_draws(self, rows) -> np.ndarray:
        idx = np.asarray(rows)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        if idx.size == 0:
            raise ValidationError("subgroup is empty")
        return self.tau_draws[:, idx].mean(axis=1)


def summarize_tau(tau_draws: np.ndarray) -> CateSummary:
    tau_draws = np.asarray(tau_draws, dtype=float)
    if tau_draws.ndim != 2 or tau_draws.shape[0] == 0:
        raise ValidationError("need a nonempty (draws, n) array")
    return CateSummary(tau_draws.mean(axis=0), percentile(tau_draws, 2.5),
                       percentile(tau_draws, 97.5), tau_draws.mean(axis=1), tau_draws)


def counterfactual_tau(draws) -> CateSummary:
    """CATE summaries from any draws object exposing ``tau`` (draws, n)."""
    return summarize_tau(draws.tau)
