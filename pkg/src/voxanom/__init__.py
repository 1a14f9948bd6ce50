"""voxanom: self-supervised density-based anomaly segmentation for 3D volumes."""

__version__ = "0.1.0"
