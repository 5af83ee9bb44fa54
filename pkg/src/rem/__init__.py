"""Reweighted expectation maximization for deep latent-variable models."""

__version__ = "0.1.0"
