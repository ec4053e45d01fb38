"""Tire-level road input estimation from cabin acceleration with dual adversarial autoencoders."""

__version__ = "0.1.0"
