"""Learning from observation on a simulated two-joint reacher."""

__version__ = "0.1.0"
