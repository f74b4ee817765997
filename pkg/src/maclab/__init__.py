"""Numerical laboratory for the Gaussian multiple-access channel with random user activity."""
__version__ = "0.1.0"
