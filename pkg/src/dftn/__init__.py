"""Deformation-flow two-stream video classification."""

__version__ = "0.1.0"
