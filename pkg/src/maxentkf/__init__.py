"""Moment-based Bayes filtering for polynomial systems with max-entropy beliefs."""

__version__ = "0.1.0"
