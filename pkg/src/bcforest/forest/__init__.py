"""Tree ensembles: structures, prior, proposals and backfitting samplers."""

from .sampler import (BartConfig, Component, Forest, PosteriorDraws, PropensityFit,
                      SamplerState, bart_design, calibrate_sigma_prior, fit_bart,
                      fit_probit_bart, fit_regression, residual_sd, sigma_conditional,
                      update_sigma, update_tree)
from .tree import (Proposal, Tree, TreePrior, leaf_suffstats, log_marginal_leaf,
                   log_tree_prior, propose_grow, propose_prune, sample_prior_tree, split_prob)

__all__ = [
    "BartConfig", "Component", "Forest", "PosteriorDraws", "PropensityFit", "Proposal",
    "SamplerState", "Tree", "TreePrior", "bart_design", "calibrate_sigma_prior", "fit_bart",
    "fit_probit_bart", "fit_regression", "leaf_suffstats", "log_marginal_leaf",
    "log_tree_prior", "propose_grow", "propose_prune", "residual_sd", "sample_prior_tree",
    "sigma_conditional", "split_prob", "update_sigma", "update_tree",
]
