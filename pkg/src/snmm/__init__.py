"""Semiparametric nonlinear mixed-effects models fitted by Laplace-approximate maximum likelihood."""

__version__ = "0.1.0"
