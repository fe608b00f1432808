"""Cell detection with tissue context."""

__version__ = "0.1.0"
