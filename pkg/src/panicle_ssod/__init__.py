"""Semi-supervised panicle detection with teacher-student pseudo-labeling."""

__version__ = "0.1.0"
