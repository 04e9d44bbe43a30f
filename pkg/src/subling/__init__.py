"""Subtitle translation pipeline tooling."""

__version__ = "0.1.0"
