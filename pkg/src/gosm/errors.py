"""Exception hierarchy shared across the package."""

from __future__ import annotations


class GosmError(Exception):
    """Base class for all package errors."""


class NonProjectableError(GosmError):
    """Point lies on or behind the camera plane."""


class InvalidDepthError(GosmError):
    """Depth value is zero or negative."""


class MapFormatError(GosmError):
    """Malformed map file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DegenerateLossError(GosmError):
    """No pixel survives the loss mask."""


class TrackingFailure(GosmError):
    """Tracking could not proceed; ``guess`` is the unchanged input pose."""

    def __init__(self, message: str, guess):
        super().__init__(message)
        self.guess = guess


class ProviderError(GosmError):
    """Segmentation or embedding provider failed or returned invalid data."""


class InvalidEmbeddingError(GosmError):
    """Embedding vector is zero, non-finite, or of the wrong dimension."""


class NoRegistryError(GosmError):
    """Query attempted against an empty label registry."""


class NoMatchError(GosmError):
    """No registered label scores above the match threshold."""


class NotFoundError(GosmError):
    """Label matched but the object could not be localized in any keyframe."""


class BlockedEndpointError(GosmError):
    """Start or goal of a planning request is in collision."""

    def __init__(self, which: str, point):
        super().__init__(f"{which} point {tuple(float(x) for x in point)} is in collision")
        self.which = which


class PlanningInfeasibleError(GosmError):
    """No collision-free samples could be drawn."""


class UnreachableError(GosmError):
    """Start and goal lie in disconnected roadmap components."""


class InvalidBoxError(GosmError):
    """Box has zero or negative extent along some axis."""


class EvaluationError(GosmError):
    """Evaluation inputs are unusable (for example, no ground truth)."""


class DatasetError(GosmError):
    """Manifest or frame files are missing or inconsistent."""
