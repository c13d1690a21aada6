"""snapflow: learn continuous-time single-cell dynamics from unpaired snapshots."""

__version__ = "0.1.0"
