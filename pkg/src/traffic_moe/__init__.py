"""Traffic speed forecasting with separate experts for normal and incident conditions."""

__version__ = "0.1.0"
