"""Jointly discriminative and generative LSTM toolkit for ROI time-series."""

__version__ = "0.1.0"
