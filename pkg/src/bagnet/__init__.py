"""Two-branch lesion segmentation network with bidirectional guidance blocks."""

__version__ = "0.1.0"
