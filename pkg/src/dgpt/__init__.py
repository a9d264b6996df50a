"""Distributed Gaussian-process target tracking in a simulated sensor network."""

__version__ = "0.1.0"
