"""Learned model updates for template-matching visual trackers, at desk scale."""

__version__ = "0.1.0"
