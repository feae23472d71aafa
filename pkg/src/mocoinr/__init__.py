"""Motion-compensated cine MRI reconstruction with hash-grid implicit networks."""

__version__ = "0.1.0"
