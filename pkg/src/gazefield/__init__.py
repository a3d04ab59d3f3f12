"""Gaze redirection with conditional two-stream feature fields, at toy scale."""

__version__ = "0.1.0"
