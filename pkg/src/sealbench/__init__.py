"""Toolkit for building real-SR degradation benchmarks and scoring models against reference lines."""

__version__ = "0.1.0"
