"""Multi-agent orchestration for diverse affective image manipulation."""

__version__ = "0.1.0"
