"""Unit tests for the trajflow pipeline."""
