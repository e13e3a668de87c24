"""Tests for Pixel-Mamba."""
