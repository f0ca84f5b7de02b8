"""Joint causal structure learning from observed and simulated tabular data."""

__version__ = "0.1.0"
