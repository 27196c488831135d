"""Orchestration: configuration, persistence, environments, stages, CLI."""
