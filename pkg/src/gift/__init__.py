"""Planar tool-use pipeline: tools, keypoints, contact experience, selector."""

__version__ = "0.1.0"
