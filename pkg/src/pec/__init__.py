"""Predictive edge caching: per-user next-content prediction, time-sensitive
caching scores, and a hybrid proactive/reactive cache simulator."""

__version__ = "0.1.0"
