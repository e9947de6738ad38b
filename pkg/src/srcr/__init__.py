"""Self-supervised open-set cross-modal retrieval on per-modality feature vectors."""

__version__ = "0.1.0"
