"""Dealer quoting when a routing score gates the flow: HJB solver, slow-score dynamics, Monte Carlo checks."""

__version__ = "0.1.0"
