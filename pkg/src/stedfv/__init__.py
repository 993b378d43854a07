"""Fisher-vector video encodings with spatio-temporal pyramids and space-time extended descriptors."""

__version__ = "0.1.0"
