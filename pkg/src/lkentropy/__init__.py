"""Langevin-Kramers entropy production in the small-mass limit."""

__version__ = "0.1.0"
