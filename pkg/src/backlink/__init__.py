"""Local training with restricted-length inter-module error back-flow."""

__version__ = "0.1.0"
