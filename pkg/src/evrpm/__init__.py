"""Propeller RPM from event streams, and RPM-aware trajectory forecasting."""

__version__ = "0.1.0"
