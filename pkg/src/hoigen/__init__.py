"""Text-driven human-object interaction motion generation with cascaded diffusion."""

__version__ = "0.1.0"
