"""Soil-moisture and vegetation-index forecasting with kriged moisture maps."""

__version__ = "0.1.0"
