"""Cold-start active learning for 3D CT segmentation with proxy-task ranking."""

__version__ = "0.1.0"
