"""Experiment runners, run persistence and the command-line entry point."""
