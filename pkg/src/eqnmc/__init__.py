"""Ensemble quasi-Newton Langevin sampling with covariance preconditioning."""

__version__ = "0.1.0"
