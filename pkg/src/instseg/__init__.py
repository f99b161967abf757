"""Query-based point-cloud instance segmentation over superpoints, in numpy."""

__version__ = "0.1.0"
