"""Dual student-teacher feature-pyramid matching with a reconstruction student."""
__version__ = "0.1.0"
