"""Numerical toolkit for sectional-hyperbolic flows and their thermodynamic formalism."""

__version__ = "0.1.0"
