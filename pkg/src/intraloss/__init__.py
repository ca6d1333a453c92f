"""Hypersphere margin softmax losses with the IntraLoss gradient-enhancing term."""

__version__ = "0.1.0"
