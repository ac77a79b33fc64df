"""Desk-scale lab for successive sub-value Q-learning."""

__version__ = "0.1.0"
