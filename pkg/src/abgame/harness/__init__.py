"""Scenario orchestration, data ingestion and the command-line interface."""
