"""
Exception hierarchy shared by every chunkrelay module.
"""

from __future__ import annotations


class ChunkRelayError(Exception):
    """Base class for all chunkrelay errors."""


# Protocol / data errors.


class MalformedMessage(ChunkRelayError, ValueError):
    """Bytes could not be parsed as the expected message."""


class InvariantViolation(ChunkRelayError, ValueError):
    """A parsed value breaks a type invariant."""


class ChecksumMismatch(ChunkRelayError, ValueError):
    """Fragment payload does not match its CRC32."""


class EmptyInput(ChunkRelayError, ValueError):
    pass


class ZeroChunkSize(ChunkRelayError, ValueError):
    pass


class HashMismatch(ChunkRelayError, ValueError):
    """Assembled bytes do not hash to the header's hash_file."""


class ForeignFragment(ChunkRelayError, ValueError):
    """Fragment belongs to a different transfer than the buffer it was offered to."""


# Runtime errors.


class Disconnected(ChunkRelayError, RuntimeError):
    """Client link (or the broker) is down."""


class DuplicateActiveTransfer(ChunkRelayError, RuntimeError):
    pass


class IllegalTransition(ChunkRelayError, RuntimeError):
    pass


class StorageFull(ChunkRelayError, RuntimeError):
    pass


class IoFailure(ChunkRelayError, RuntimeError):
    pass


class RequestTimeout(ChunkRelayError, RuntimeError):
    pass


class ConfigError(ChunkRelayError, RuntimeError):
    pass


class VerificationFailure(ChunkRelayError, RuntimeError):
    """A stored image does not match its source; `report` carries the finished run."""

    def __init__(self, message: str, report: object = None) -> None:
        super().__init__(message)
        self.report = report


class ShapeMismatch(ChunkRelayError, RuntimeError):
    pass
