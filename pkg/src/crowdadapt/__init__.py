"""Scene-adaptive crowd counting with guided batch normalisation, on a from-scratch numpy autograd."""

__version__ = "0.1.0"
