"""Simulator of a 64-GBd dual-polarization bipolar m-ASK coherent link."""

__version__ = "0.1.0"
