"""Cooperative multi-agent Q-learning with an episodic memory of embedded states."""

__version__ = "0.1.0"
