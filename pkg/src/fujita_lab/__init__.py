"""Numerical laboratory for the Fujita dichotomy on unimodular Lie groups."""

__version__ = "0.1.0"
