"""Scenario configuration, batched simulation, metrics and CLI."""
