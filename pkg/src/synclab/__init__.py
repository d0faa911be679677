"""Toy laboratory for flow-matching preference optimization with temporal negatives."""

__version__ = "0.1.0"
