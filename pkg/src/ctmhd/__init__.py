"""Constrained-transport mixed finite elements for stationary resistive MHD."""

__version__ = "0.1.0"
