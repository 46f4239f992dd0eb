"""Loss- and density-based curriculum learning for sliding-window forecasting."""

__version__ = "0.1.0"
