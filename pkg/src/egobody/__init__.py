"""Egocentric camera views to a textured, rigged 3D body mesh."""

__version__ = "0.1.0"
