"""Experiment harness: configuration, multi-seed runs, comparisons and the CLI."""
