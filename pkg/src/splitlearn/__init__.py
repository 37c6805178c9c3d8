"""Split learning with a shared common extractor, a cloud-hosted middle, and local classifiers."""

__version__ = "0.1.0"
