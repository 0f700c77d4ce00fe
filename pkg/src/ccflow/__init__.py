"""Coupled convolutional LSTM occupancy-flow forecasting at desk scale."""

__version__ = "0.1.0"
