"""Bayesian optimization for pure Nash equilibria of expensive black-box games."""

__version__ = "0.1.0"
