"""Desk-scale simulator of class-consistent federated semantic segmentation."""

__version__ = "0.1.0"
