"""Two-stage adaptive survival tests for correlated PFS/OS endpoints."""

__version__ = "0.1.0"
