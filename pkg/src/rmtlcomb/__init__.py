"""Restricted mean time lost and combined two-sample tests for competing risks."""

__version__ = "0.1.0"
