"""Equation-by-equation Bayesian estimation of large TVP-VARs with stochastic
volatility, coupled through a Gaussian-mixture copula."""

__version__ = "0.1.0"
