"""On-policy optimization with discretized and ordinal action heads."""

__version__ = "0.1.0"
