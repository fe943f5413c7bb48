"""Few-shot video object detection with confidence-filtered temporal feature propagation."""

__version__ = "0.1.0"
