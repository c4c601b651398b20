"""LiDAR-camera extrinsic calibration toolkit."""

__version__ = "0.1.0"
