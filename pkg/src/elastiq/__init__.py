"""Deadline-aware elastic scheduling and simulation for batched window queries."""

__version__ = "0.1.0"
