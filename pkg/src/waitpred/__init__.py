"""Pre-request and post-request passenger waiting-time prediction."""

__version__ = "0.1.0"
