"""gridshield: robust power-system state estimation and vulnerability analysis."""

__version__ = "0.1.0"
