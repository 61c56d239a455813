"""Surrogate-accelerated Bayesian calibration of a stochastic agent-based epidemic model."""

__version__ = "0.1.0"
