"""Extended ensemble Kalman filters and smoothers for hierarchical state-space models."""

__version__ = "0.1.0"
