"""Traffic violation detection from per-frame object detections and frame images."""

__version__ = "0.1.0"
