"""Publication figures from manifoldmc experiment CSVs."""

__version__ = "0.1.0"
