"""Multi-task soft actor-critic with context-attended mixtures of encoders."""

__version__ = "0.1.0"
