"""Session-based recommendation with context-augmented recurrent networks."""

__version__ = "0.1.0"
