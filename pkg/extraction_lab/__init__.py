"""Model-extraction attack laboratory and PRADA extraction detector."""

__version__ = "0.1.0"
