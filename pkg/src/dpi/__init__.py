"""Dual policy iteration: alternating trust-region updates of a reactive policy and a model-based expert."""

__version__ = "0.1.0"
