"""Synthetic data, experiment drivers, benchmarks and the command line."""
