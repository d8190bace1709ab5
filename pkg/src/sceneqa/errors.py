"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class SceneQAError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SceneQAError):
    """Caller violated a precondition (bad duration, empty list, ...)."""


class ParseFailure(SceneQAError):
    """Model output did not match the expected response grammar."""

    def __init__(self, message: str, warnings: list[str] | None = None):
        super().__init__(message)
        self.warnings = warnings or []


class CapExceededError(SceneQAError):
    """A request carried more images than the hard per-query cap (a bug, never retried)."""


class TransportError(SceneQAError):
    """Backend unreachable or returned a non-retryable/permanently failing status."""

    def __init__(self, message: str, status: int | None = None, permanent: bool = False):
        super().__init__(message)
        self.status = status
        self.permanent = permanent


class ReplayMissError(SceneQAError):
    """Scripted backend has no transcript record for the requested call."""

    def __init__(self, stage_tag: str, unit_id: str, attempt: int = 0):
        super().__init__(
            f"no scripted transcript for stage={stage_tag} unit={unit_id} attempt={attempt}"
        )
        self.stage_tag = stage_tag
        self.unit_id = unit_id
        self.attempt = attempt


class StoreError(SceneQAError):
    """Persistence-layer failure."""


class SchemaMigrationError(StoreError):
    """Persisted store carries an unsupported schema version."""


class CorruptRecordError(StoreError):
    """A persisted record failed to decode; names the byte offset of the bad record."""

    def __init__(self, path: str, offset: int, reason: str):
        super().__init__(f"{path}: corrupt record at byte offset {offset}: {reason}")
        self.path = path
        self.offset = offset
