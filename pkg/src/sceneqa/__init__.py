"""Map-reduce long-video question answering over scene-level captions."""

__version__ = "0.1.0"
