"""Density-map crowd counting with a multi-scale fully convolutional network, in numpy."""

__version__ = "0.1.0"
