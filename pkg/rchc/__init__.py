"""Source-free domain adaptation with reconciled centroid-hypothesis conflict."""

__version__ = "0.1.0"
