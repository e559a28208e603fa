"""Multi-UAV wall-building simulator: sensing, mapping, and mission execution."""

__version__ = "0.1.0"
