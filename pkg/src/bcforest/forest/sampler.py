"""Backfitting MCMC for tree ensembles: plain BART, ps-BART and probit BART."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from scipy.special import ndtr, ndtri

from ..data import (CutpointGrid, Dataset, DesignMatrix, ValidationError, build_cutpoints,
                    design_matrix)
from . import _kernels as K
from .tree import DEFAULT_CAPACITY, Tree, TreePrior


class Forest:
    """``L`` trees stored as (L, capacity) node arrays plus their prior."""

    def __init__(self, prior: TreePrior, capacity: int = DEFAULT_CAPACITY):
        L = prior.num_trees
        self.prior = prior
        self.var = np.full((L, capacity), -1, np.int32)
        self.cut = np.full((L, capacity), -1, np.int32)
        self.left = np.full((L, capacity), -1, np.int32)
        self.right = np.full((L, capacity), -1, np.int32)
        self.parent = np.full((L, capacity), -1, np.int32)
        self.depth = np.zeros((L, capacity), np.int32)
        self.value = np.zeros((L, capacity))
        self.active = np.zeros((L, capacity), np.uint8)
        self.active[:, 0] = 1

    @property
    def num_trees(self) -> int:
        return self.var.shape[0]

    def tree(self, l: int) -> Tree:
        """View of tree ``l``; edits write through to the forest."""
        return Tree(*(getattr(self, f)[l] for f in Tree.FIELDS))

    @property
    def trees(self) -> list[Tree]:
        return [self.tree(l) for l in range(self.num_trees)]

    def predict(self, bins: np.ndarray) -> np.ndarray:
        out = np.empty(bins.shape[1])
        K.predict_kernel(self.var, self.cut, self.left, self.right, self.value, bins, out)
        return out

    def leaf_index(self, bins: np.ndarray) -> np.ndarray:
        out = np.empty((self.num_trees, bins.shape[1]), np.int32)
        K.leaf_index_kernel(self.var, self.cut, self.left, self.right, bins, out)
        return out

    def contrast(self, bins: np.ndarray, zcol: int) -> np.ndarray:
        out = np.empty(bins.shape[1])
        K.contrast_kernel(self.var, self.cut, self.left, self.right, self.value, self.active,
                          bins, zcol, out)
        return out

    def num_leaves(self) -> np.ndarray:
        return ((self.active == 1) & (self.var < 0)).sum(axis=1)


@dataclass
class Component:
    """A forest bound to its design (binned), per-row basis weights and fit.

    The component contributes ``weights[i] * fit[i]`` to the model, where
    ``fit`` is the raw forest sum ``sum_l g_l(x_i)``.
    """

    forest: Forest
    bins: np.ndarray
    ncuts: np.ndarray
    weights: np.ndarray
    fit: np.ndarray = None
    stats: np.ndarray = field(default_factory=lambda: np.zeros(4, np.int64))

    def __post_init__(self):
        n = self.bins.shape[1]
        self.leaf_of = self.forest.leaf_index(self.bins)
        if self.fit is None:
            self.fit = self.forest.predict(self.bins)
        cap = self.forest.var.shape[1]
        p = self.ncuts.size
        self._lo = np.empty(p, np.int64)
        self._hi = np.empty(p, np.int64)
        self._scratch = np.empty(cap, np.int64)
        self._nb = np.empty(cap)
        self._sb = np.empty(cap)
        assert self.weights.shape == (n,)

    def contribution(self) -> np.ndarray:
        return self.weights * self.fit

    def sweep(self, resid, sigma, rng, use_likelihood=True):
        f = self.forest
        K.sweep_kernel(f.var, f.cut, f.left, f.right, f.parent, f.depth, f.value, f.active,
                       self.leaf_of, self.bins, self.ncuts, resid, self.fit, self.weights,
                       sigma, f.prior.leaf_scale, f.prior.eta, f.prior.beta, use_likelihood,
                       rng, self._lo, self._hi, self._scratch, self._nb, self._sb, self.stats)

    def update_tree(self, t, resid, sigma, rng, use_likelihood=True):
        f = self.forest
        K.update_tree_kernel(t, f.var, f.cut, f.left, f.right, f.parent, f.depth, f.value,
                             f.active, self.leaf_of, self.bins, self.ncuts, resid, self.fit,
                             self.weights, sigma, f.prior.leaf_scale, f.prior.eta, f.prior.beta,
                             use_likelihood, rng, self._lo, self._hi, self._scratch, self._nb,
                             self._sb, self.stats)

    def set_weights(self, weights: np.ndarray, resid: np.ndarray):
        """Change the basis, keeping ``resid`` consistent with the new fit."""
        resid += self.weights * self.fit - weights * self.fit
        self.weights[:] = weights


@dataclass
class SamplerState:
    """Latent state of one chain: components, residual cache ``y - fit``, sigma."""

    y: np.ndarray
    components: list[Component]
    sigma: float
    rng: np.random.Generator
    use_likelihood: bool = True
    resid: np.ndarray = None

    def __post_init__(self):
        if self.resid is None:
            self.resid = self.y - self.total_fit()

    def total_fit(self) -> np.ndarray:
        total = np.zeros_like(self.y)
        for comp in self.components:
            total += comp.contribution()
        return total

    def residual_error(self) -> float:
        """``max |(y - prediction) - resid|`` with prediction recomputed from the trees."""
        total = np.zeros_like(self.y)
        for comp in self.components:
            total += comp.weights * comp.forest.predict(comp.bins)
        return float(np.max(np.abs(self.y - total - self.resid)))


def update_tree(state: SamplerState, index: int, rng: np.random.Generator | None = None,
                component: int = 0) -> SamplerState:
    """One GROW/PRUNE Metropolis-Hastings step on tree ``index`` followed by a
    conjugate redraw of its leaf parameters (backfitting against the other trees)."""
    comp = state.components[component]
    comp.update_tree(index, state.resid, state.sigma, rng or state.rng, state.use_likelihood)
    return state


def sigma_conditional(resid: np.ndarray, nu: float, lam: float) -> tuple[float, float]:
    """Degrees of freedom and scale of the scaled-inverse-chi^2 conditional of sigma^2."""
    n = resid.shape[0]
    return nu + n, (nu * lam + float(resid @ resid)) / (nu + n)


def update_sigma(state: SamplerState, prior: tuple[float, float],
                 rng: np.random.Generator | None = None) -> SamplerState:
    nu, lam = prior
    df, scale = sigma_conditional(state.resid, nu, lam)
    state.sigma = math.sqrt(df * scale / (rng or state.rng).chisquare(df))
    return state


def residual_sd(y: np.ndarray, X: np.ndarray) -> float:
    """Residual sd of a least-squares fit of ``y`` on ``[1, X]``; 1 when d >= n."""
    n = y.shape[0]
    A = np.column_stack([np.ones(n), X])
    if A.shape[1] >= n:
        return 1.0
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    rank = np.linalg.matrix_rank(A)
    rss = float(np.sum((y - A @ coef) ** 2))
    return math.sqrt(rss / max(n - rank, 1)) if rss > 0 else 1.0


def calibrate_sigma_prior(sigma_hat: float, nu: float = 3.0, q: float = 0.9) -> tuple[float, float]:
    """``(nu, lambda)`` with ``P(sigma < sigma_hat) = q`` under scaled-inv-chi^2(nu, lambda)."""
    lam = sigma_hat ** 2 * stats.chi2.ppf(1.0 - q, nu) / nu
    return nu, lam


@dataclass(frozen=True)
class BartConfig:
    """Sampler settings. ``iterations`` counts burn-in; kept draws are
    ``iterations - burn_in`` per chain."""

    num_trees: int = 200
    eta: float = 0.95
    beta: float = 2.0
    k: float = 2.0
    nu: float = 3.0
    q: float = 0.9
    iterations: int = 2000
    burn_in: int = 1000
    chains: int = 1
    seed: int = 0
    max_cuts: int = 100
    capacity: int = DEFAULT_CAPACITY

    def validate(self):
        if self.num_trees <= 0:
            raise ValidationError("num_trees must be positive")
        if self.burn_in < 0 or self.iterations <= self.burn_in:
            raise ValidationError("iterations must exceed burn_in >= 0")
        if self.chains < 1:
            raise ValidationError("chains must be >= 1")
        return self

    @property
    def kept(self) -> int:
        return self.iterations - self.burn_in


def chain_seeds(seed: int, chains: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(chains)


@dataclass
class PosteriorDraws:
    """Kept draws stacked over chains (raw outcome units).

    ``tau`` is (draws, n) with per-unit treatment effects when the model has
    one; ``fit`` is (draws, n) of f(x_i, z_i); ``predict`` holds draws at
    extra prediction rows when requested.
    """

    sigma: np.ndarray
    chain: np.ndarray
    iteration: np.ndarray
    tau: np.ndarray | None = None
    fit: np.ndarray | None = None
    predict: np.ndarray | None = None
    accept: dict = field(default_factory=dict)

    @property
    def num_draws(self) -> int:
        return self.sigma.shape[0]

    @staticmethod
    def concat(parts: list["PosteriorDraws"]) -> "PosteriorDraws":
        def cat(name):
            vals = [getattr(p, name) for p in parts]
            return None if vals[0] is None else np.concatenate(vals)
        accept = {}
        for p in parts:
            for key, v in p.accept.items():
                accept[key] = accept.get(key, 0) + v
        return PosteriorDraws(cat("sigma"), cat("chain"), cat("iteration"), cat("tau"),
                              cat("fit"), cat("predict"), accept)


def _run_regression_chain(y_std, bins, ncuts, prior, sigma_prior, sigma0_init, config,
                          seed_seq, chain_id, zcol=None, predict_bins=None, keep_fit=True):
    rng = np.random.default_rng(seed_seq)
    comp = Component(Forest(prior, config.capacity), bins, ncuts, np.ones(y_std.shape[0]))
    state = SamplerState(y_std.copy(), [comp], sigma0_init, rng)
    kept = config.kept
    n = y_std.shape[0]
    sig = np.empty(kept)
    tau = np.empty((kept, n)) if zcol is not None else None
    fit = np.empty((kept, n)) if keep_fit else None
    pred = np.empty((kept, predict_bins.shape[1])) if predict_bins is not None else None
    for it in range(config.iterations):
        comp.sweep(state.resid, state.sigma, rng)
        update_sigma(state, sigma_prior)
        k = it - config.burn_in
        if k >= 0:
            sig[k] = state.sigma
            if fit is not None:
                fit[k] = comp.fit
            if tau is not None:
                tau[k] = comp.forest.contrast(bins, zcol)
            if pred is not None:
                pred[k] = comp.forest.predict(predict_bins)
    accept = dict(zip(("grow_proposed", "grow_accepted", "prune_proposed", "prune_accepted"),
                      comp.stats.tolist()))
    return PosteriorDraws(sig, np.full(kept, chain_id), np.arange(config.burn_in, config.iterations),
                          tau, fit, pred, accept)


def _map_chains(fn, args_list, jobs):
    if jobs <= 1 or len(args_list) == 1:
        return [fn(*a) for a in args_list]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, *zip(*args_list)))


def fit_regression(y: np.ndarray, dm: DesignMatrix, config: BartConfig = BartConfig(),
                   grid: CutpointGrid | None = None, zcol: int | None = None,
                   predict: np.ndarray | None = None, jobs: int = 1,
                   keep_fit: bool = True) -> PosteriorDraws:
    """Plain BART regression of ``y`` on ``dm``.

    Outcomes are standardized internally; every returned quantity is in raw
    units. With ``zcol`` the draws include ``f(x, 1) - f(x, 0)`` toggling that
    0/1 column; ``predict`` is an extra design-matrix array to predict at.
    """
    config.validate()
    y = np.asarray(y, dtype=float)
    y_mean, y_sd = float(y.mean()), float(y.std(ddof=1))
    if not y_sd > 0:
        raise ValidationError("outcome is constant")
    y_std = (y - y_mean) / y_sd
    grid = grid or build_cutpoints(dm, config.max_cuts)
    bins = grid.bin(dm.values)
    pbins = grid.bin(predict) if predict is not None else None
    sigma0 = (y_std.max() - y_std.min()) / (2.0 * config.k)
    prior = TreePrior.from_sigma0(sigma0, config.num_trees, config.eta, config.beta)
    sigma_hat = residual_sd(y_std, dm.values)
    sigma_prior = calibrate_sigma_prior(sigma_hat, config.nu, config.q)
    seeds = chain_seeds(config.seed, config.chains)
    args = [(y_std, bins, grid.ncuts, prior, sigma_prior, sigma_hat, config, s, c, zcol, pbins,
             keep_fit) for c, s in enumerate(seeds)]
    draws = PosteriorDraws.concat(_map_chains(_run_regression_chain, args, jobs))
    draws.sigma = draws.sigma * y_sd
    if draws.fit is not None:
        draws.fit = y_mean + y_sd * draws.fit
    if draws.tau is not None:
        draws.tau = y_sd * draws.tau
    if draws.predict is not None:
        draws.predict = y_mean + y_sd * draws.predict
    return draws


def bart_design(ds: Dataset, with_propensity: bool = False) -> tuple[DesignMatrix, int]:
    """Covariates plus the treatment column (and optionally pi_hat); returns
    the design and the index of the treatment column."""
    dm = design_matrix(ds.X, ds.kinds).append("z", ds.z, indicator=True)
    zcol = dm.shape[1] - 1
    if with_propensity:
        if ds.pi_hat is None:
            raise ValidationError("ps-BART needs pi_hat")
        dm = dm.append("pi_hat", ds.pi_hat)
    return dm, zcol


def fit_bart(ds: Dataset, config: BartConfig = BartConfig(), with_propensity: bool = False,
             jobs: int = 1) -> PosteriorDraws:
    """BART over (x, z), or ps-BART over (x, z, pi_hat) when ``with_propensity``.

    Treatment-effect draws reroute each row with z forced to 1 and then 0,
    holding pi_hat fixed since it is a function of x alone.
    """
    config.validate()
    dm, zcol = bart_design(ds, with_propensity)
    return fit_regression(ds.y, dm, config, zcol=zcol, jobs=jobs)


PROBIT_CONFIG = BartConfig(num_trees=50, iterations=1500, burn_in=500)


@dataclass
class PropensityFit:
    pi_hat: np.ndarray
    draws: np.ndarray
    offset: float


def _run_probit_chain(z, bins, ncuts, prior, offset, config, seed_seq):
    rng = np.random.default_rng(seed_seq)
    n = z.shape[0]
    comp = Component(Forest(prior, config.capacity), bins, ncuts, np.ones(n))
    latent = np.empty(n)
    state = SamplerState(np.zeros(n), [comp], 1.0, rng)
    draws = np.empty((config.kept, n))
    zi = z.astype(np.int64)
    for it in range(config.iterations):
        K.probit_latent_kernel(offset + comp.fit, zi, rng, latent)
        state.resid[:] = (latent - offset) - comp.fit
        comp.sweep(state.resid, 1.0, rng)
        k = it - config.burn_in
        if k >= 0:
            draws[k] = ndtr(offset + comp.fit)
    return draws


def fit_probit_bart(X: DesignMatrix, z: np.ndarray, config: BartConfig = PROBIT_CONFIG,
                    jobs: int = 1) -> PropensityFit:
    """Probit BART for P(z = 1 | x) via truncated-normal latent variables.

    The forest is fit to the latent ``w`` with unit error variance and a
    constant offset ``Phi^-1(mean z)``; ``pi_hat`` averages ``Phi(f(x_i))``
    over kept draws and is clamped to [0.001, 0.999].
    """
    config.validate()
    z = np.asarray(z)
    if not np.isin(z, (0, 1)).all():
        raise ValidationError("treatment must be 0/1")
    zbar = float(z.mean())
    if zbar in (0.0, 1.0):
        raise ValidationError("propensity model needs both classes present")
    offset = float(ndtri(zbar))
    grid = build_cutpoints(X, config.max_cuts)
    bins = grid.bin(X.values)
    # f lies in [-3, 3] with prior probability ~0.95 when k = 2
    prior = TreePrior.from_sigma0(3.0 / config.k, config.num_trees, config.eta, config.beta)
    seeds = chain_seeds(config.seed, config.chains)
    args = [(z, bins, grid.ncuts, prior, offset, config, s) for s in seeds]
    draws = np.concatenate(_map_chains(_run_probit_chain, args, jobs))
    pi_hat = np.clip(draws.mean(axis=0), 0.001, 0.999)
    return PropensityFit(pi_hat, draws, offset)


def with_seed(config, seed: int):
    return replace(config, seed=int(seed))
