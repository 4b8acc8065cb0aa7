"""Mixed tabular + 3D-image transformer classifier, desk scale."""

__version__ = "0.1.0"
