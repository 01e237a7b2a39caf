"""Difficulty estimation for piano sheet music from bootleg scores."""

__version__ = "0.1.0"
