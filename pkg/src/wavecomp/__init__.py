"""Disturbance-rejection control learning for a planar underwater robot."""

__version__ = "0.1.0"
