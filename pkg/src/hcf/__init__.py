"""Hybrid conditional forecaster: event-aware probabilistic multi-horizon forecasting."""

__version__ = "0.1.0"
