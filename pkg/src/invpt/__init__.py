"""Multi-task dense prediction with an inverted-pyramid transformer decoder,
built on a small float64 autodiff core."""

__version__ = "0.1.0"
