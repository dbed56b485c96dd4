"""Bayesian neural networks with hierarchical GP priors over their weights."""

__version__ = "0.1.0"
