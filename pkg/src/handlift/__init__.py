"""Multi-view 3D hand keypoint lifting, clustering, and tracking."""

__version__ = "0.1.0"
