"""Utility helpers for stitchkit."""
