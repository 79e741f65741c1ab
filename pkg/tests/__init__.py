"""Tests for sketchstack."""
