"""Hierarchical attention neural operator for multiscale elliptic PDEs."""

__version__ = "0.1.0"
