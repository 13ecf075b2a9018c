"""Object-aware and optimal-transport feature alignment for query-based detectors."""

__version__ = "0.1.0"
