"""Transit load forecasting: APC cleaning, data fusion and occupancy models."""

__version__ = "0.1.0"
