"""Deep kernel transfer for few-shot regression and classification."""

__version__ = "0.1.0"
