"""Test suite for the trajflow pipeline."""
