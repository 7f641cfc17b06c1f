"""Tiny ULTR.

A small toolkit to simulate clicks, estimate position bias and train rankers with naive and
unbiased learning-to-rank objectives, using numpy.
"""

__version__ = "0.1.0"
