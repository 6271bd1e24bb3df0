"""Predictive-coding recurrent network with hidden causes and attractor switching."""

__version__ = "0.1.0"
