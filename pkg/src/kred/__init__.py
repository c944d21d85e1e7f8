"""kred: static reduction and stochastic validation of Kappa-style rule-based models."""

__version__ = "0.1.0"
