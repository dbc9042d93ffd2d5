"""Desk-scale federated continual learning simulator for terrain segmentation."""

__version__ = "0.1.0"
