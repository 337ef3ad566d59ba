"""Tube-based smooth MPC for a planar three-link manipulator."""

__version__ = "0.1.0"
