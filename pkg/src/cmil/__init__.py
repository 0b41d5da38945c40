"""Concept-based multiple-instance-learning classifier over bags of patch embeddings."""

__version__ = "0.1.0"
