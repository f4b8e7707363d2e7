"""Epidemic containment experiments on mobility networks estimated from call detail records."""

__version__ = "0.1.0"
