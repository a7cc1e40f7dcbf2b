"""Unsupervised anomaly detection for multi-entity KPI telemetry."""

__version__ = "0.1.0"
