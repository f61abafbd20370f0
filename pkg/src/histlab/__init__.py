"""Decoherent-histories and Bohmian probabilities for coarse-grained position histories."""

__version__ = "0.1.0"
