"""Contextual-bandit trial engine for personalized just-in-time adaptive interventions."""

__version__ = "0.1.0"
