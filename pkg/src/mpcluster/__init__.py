"""Cycle-level model of a 16-core cluster with mixed-precision SIMD and lockstep execution."""

__version__ = "0.1.0"
