"""Bit-flip resilience simulator for numeric formats, dense networks and LUT networks."""

__version__ = "0.1.0"
