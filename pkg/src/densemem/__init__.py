"""Dense associative memories, from Hebbian Hopfield nets to static-memory attention."""

__version__ = "0.1.0"
