"""Synthetic data, sequence I/O, toy training, reports, and the CLI."""
