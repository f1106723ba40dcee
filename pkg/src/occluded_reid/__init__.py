"""Occluded person re-identification with visibility-graph matching and feature recovery."""

__version__ = "0.1.0"
