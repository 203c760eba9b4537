"""Version information for fedsis-lab."""

__version__ = "0.1.0"
