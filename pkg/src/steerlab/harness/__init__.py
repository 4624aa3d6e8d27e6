"""Experiment orchestration: corpus, configuration, pipeline, and CLI."""
