"""Lung nodule segmentation and recurrence-risk pipeline."""

__version__ = "0.1.0"
