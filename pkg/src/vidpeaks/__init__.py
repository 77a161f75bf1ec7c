"""Predict and explain population-level peaks in learner video-control behavior."""

__version__ = "0.1.0"

SIGNALS = ("Watched", "PausedAt", "RewoundTo", "SkippedFrom")
