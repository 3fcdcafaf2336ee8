"""Cone-beam CT rigid head-motion simulation and autofocus compensation."""

__version__ = "0.1.0"
