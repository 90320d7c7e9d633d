"""dagdoc: DAG flows with content-addressed run records and generated DAG Cards."""

from __future__ import annotations

from pathlib import Path

__version__ = "0.1.0"

FIXTURES = Path(__file__).parent / "fixtures"


def example_flow_path() -> Path:
    """Path of the bundled example flow (gather, clean/aggregate, features, train, evaluate)."""
    return FIXTURES / "substitutes.flow"
