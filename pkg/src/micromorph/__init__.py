"""Finite element solver and verification lab for the relaxed micromorphic model."""

__version__ = "0.1.0"
