"""Teacher-student mitosis segmentation and atypia classification."""

__version__ = "0.1.0"
