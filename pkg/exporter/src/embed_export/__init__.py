"""Frozen-backbone embedding exporter producing FSB1 feature files."""

__version__ = "0.1.0"
