"""Domain-adaptive Siamese tracking workbench."""

__version__ = "0.1.0"
