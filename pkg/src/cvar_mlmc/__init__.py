"""CVaR minimisation for stochastic models via multilevel Monte Carlo."""

__version__ = "0.1.0"
