"""Graph classification with Gaussian-mixture augmentation of GNN embeddings."""

__version__ = "0.1.0"
