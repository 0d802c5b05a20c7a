"""cpkern: sparse CP tensor regression for spatially misaligned data."""

__version__ = "0.1.0"
