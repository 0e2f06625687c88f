"""Qubit in a random-matrix environment: ensemble channels and non-Markovianity measures."""
__version__ = "0.1.0"
