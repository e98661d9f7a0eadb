"""Masked image modeling with a deblurring pretext task, in numpy."""

__version__ = "0.1.0"
