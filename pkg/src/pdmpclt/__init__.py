"""Simulation and CLT diagnostics for randomly switched semiflow processes."""

__version__ = "0.1.0"
