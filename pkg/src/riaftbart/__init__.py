"""Random-intercept accelerated failure time model with a BART mean function."""

__version__ = "0.1.0"
