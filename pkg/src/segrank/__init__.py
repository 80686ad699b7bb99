"""Evaluation and meta-analysis engine for multi-annotator 3D segmentation challenges."""

__version__ = "0.1.0"
