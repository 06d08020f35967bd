"""Desk-scale laboratory for the early phase of training under iterative magnitude pruning."""

__version__ = "0.1.0"
