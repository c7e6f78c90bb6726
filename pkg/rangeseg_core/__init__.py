"""Range-image LIDAR semantic segmentation with a learned point-group projection."""

__version__ = "0.1.0"
