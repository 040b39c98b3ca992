"""Instance-adaptive self-training for dense prediction under domain shift."""

__version__ = "1.0.0"
