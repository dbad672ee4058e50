"""Task-driven object scoring with a gated graph network over scene objects."""

__version__ = "0.1.0"
