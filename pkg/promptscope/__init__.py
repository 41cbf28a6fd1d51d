"""promptscope: prompt-conditioned detection and region description."""

__version__ = "0.1.0"
