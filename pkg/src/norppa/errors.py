"""Error types shared across the pipeline.

Every stage failure carries a stage label so batch drivers and the HTTP
service can report where a query died without parsing message strings.
"""

from __future__ import annotations

STAGES = ("preprocess", "features", "vocab", "encode", "index", "geoverify")


class NorppaError(Exception):
    """Base class for all engine errors."""


class StageError(NorppaError):
    """An operation failed inside a named pipeline stage."""

    def __init__(self, stage: str, message: str):
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class EmptyPatternError(StageError):
    def __init__(self, message: str = "empty pattern"):
        super().__init__("preprocess", message)


class FormatError(NorppaError):
    """A persisted artifact has a bad magic, version or payload."""
