"""Vision-aided gradient-based B-spline trajectory planning toolkit."""

__version__ = "0.1.0"
