"""Explainable active-learning metamodels for black-box simulators."""

__version__ = "0.1.0"
