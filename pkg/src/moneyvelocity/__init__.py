"""Velocity of money from holding-time and lifespan distributions."""

__version__ = "0.1.0"
