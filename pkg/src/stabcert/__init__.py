"""Certified transient-stability preventive control with neural surrogates."""

__version__ = "0.1.0"
