"""Numerical laboratory for generalized reflected BSDEs with stochastic quadratic growth."""

__version__ = "0.1.0"
