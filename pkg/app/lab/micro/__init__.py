"""Microscopic energy-exchange models built on chaotic fast dynamics."""
