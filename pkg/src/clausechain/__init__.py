"""Prompt chains that turn contract clauses into structured multiple-choice answers."""

__version__ = "0.1.0"
