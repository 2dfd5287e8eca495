"""Separable early classification of time series with man-tailored and
reinforcement-learned trigger functions."""

__version__ = "0.1.0"
