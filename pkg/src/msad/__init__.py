"""Multi-sensor (RGB, infrared, point cloud) anomaly detection with memory-bank
scoring and a one-class SVM decision gate."""

__version__ = "0.1.0"
