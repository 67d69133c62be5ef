"""Isometric agent/object representations learned from actions."""
