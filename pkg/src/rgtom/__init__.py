"""Theory-of-Mind speakers in synthetic referential games."""

__version__ = "0.1.0"
