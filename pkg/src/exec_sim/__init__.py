"""Limit-order-book execution simulator with certainty-equivalent RL."""

__version__ = "0.1.0"
