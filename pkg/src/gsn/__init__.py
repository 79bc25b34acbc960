"""Graph Sequential Network."""
__version__ = "0.1.0"
