"""Kernel generators, golden models, data layouts and benchmarks."""
