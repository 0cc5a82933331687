"""Simulation and analysis of NV-center detected two-dimensional nuclear spectroscopy."""

__version__ = "0.1.0"
