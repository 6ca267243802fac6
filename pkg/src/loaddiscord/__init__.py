"""Daily load-profile discord detection for portfolios of hourly meter series."""

__version__ = "0.1.0"
