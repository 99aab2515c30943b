"""Integration tests for the trajflow pipeline."""
