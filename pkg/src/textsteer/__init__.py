"""Text-conditioned steering of a frozen vision transformer, on numpy."""

__version__ = "0.1.0"
