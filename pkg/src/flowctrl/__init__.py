"""Language-conditioned flow-matching control on a toy planar chain."""

__version__ = "0.1.0"
