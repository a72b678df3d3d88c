"""Bayesian causal forests and BART for heterogeneous treatment effects."""

__version__ = "0.1.0"
