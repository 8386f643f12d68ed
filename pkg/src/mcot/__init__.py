"""Particle solver for moment-constrained multi-marginal optimal transport."""

__version__ = "0.1.0"
