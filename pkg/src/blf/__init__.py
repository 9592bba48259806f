"""Long-context encoder pretraining with replaced-token detection, from scratch."""

__version__ = "0.1.0"
