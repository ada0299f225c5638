"""Delay-optimal cache placement for cooperative Fog-RAN base stations."""

__version__ = "0.1.0"
