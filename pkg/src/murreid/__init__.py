"""Dialect identification from dialectal transcripts and sentence-aligned audio."""

__version__ = "0.1.0"
