"""Compression-and-flip preprocessing defense against gradient attacks, with a
small numpy classifier, four attacks, two block codecs and an evaluation harness."""

__version__ = "0.1.0"
