"""Open-set semi-supervised learning with self-supervision and free-energy scoring."""

__version__ = "0.1.0"
