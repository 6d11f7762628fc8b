"""Policy-bundle clustering and lagged Poisson fixed-effects evaluation."""

__version__ = "0.1.0"
