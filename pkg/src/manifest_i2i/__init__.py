"""Few-shot image translation by deforming a style manifold learned between
anchor domains."""

__version__ = "0.1.0"
