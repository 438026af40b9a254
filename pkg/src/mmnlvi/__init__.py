"""Bayesian mixed multinomial logit via stochastic and amortized variational inference."""

__version__ = "0.1.0"
