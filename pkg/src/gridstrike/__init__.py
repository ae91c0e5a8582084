"""Worst-case line impedance attacks on AC power grids."""

__version__ = "0.1.0"
