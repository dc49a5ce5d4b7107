"""Glyph recognition via hierarchical visual features and graph reasoning."""

__version__ = "0.1.0"

from .tensor import Parameter, Tape, Tensor, backward, tape

__all__ = ["Parameter", "Tape", "Tensor", "backward", "tape", "__version__"]
