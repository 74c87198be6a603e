"""Instrumental-variable off-policy evaluation for confounded MDPs."""

__version__ = "0.1.0"
