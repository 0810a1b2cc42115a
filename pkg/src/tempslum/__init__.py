"""Semi-supervised mapping of temporary settlements in satellite imagery."""

__version__ = "0.1.0"
