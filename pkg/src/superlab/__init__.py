"""Simulation and numerical verification toolkit for stable superprocesses."""

__version__ = "0.1.0"
