"""Random-sample keypoint detector/descriptor pipeline for point-cloud registration."""

__version__ = "0.1.0"
