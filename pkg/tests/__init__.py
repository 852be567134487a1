"""Tests for gazereach."""
