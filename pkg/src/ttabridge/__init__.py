"""Text-to-audio synthesis through an image-embedding bridge."""

__version__ = "0.1.0"
