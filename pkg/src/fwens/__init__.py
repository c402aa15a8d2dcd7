"""Memory-efficient transformer ensembles with rank-1 fast weights."""

__version__ = "0.1.0"
