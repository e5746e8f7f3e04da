"""Tests for the extraction-lab package."""
