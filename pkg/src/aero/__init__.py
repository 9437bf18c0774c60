"""Quantile CNN forecasting with adversarial energy-redirection optimizers."""

__version__ = "0.1.0"
