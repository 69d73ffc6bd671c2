"""Whole-slide cytology screening: stitching, flow-based cell segmentation,
transformer classification, and report aggregation.
"""

__version__ = "0.1.0"
