"""Deep-weight-prior transfer for 3D segmentation on synthetic volumes."""

__version__ = "0.1.0"
