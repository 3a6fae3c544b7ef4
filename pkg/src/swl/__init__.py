"""Spherical world-locking for egocentric multisensory localisation."""

__version__ = "0.1.0"
