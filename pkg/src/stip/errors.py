"""Exception hierarchy shared by every module."""


class StipError(Exception):
    """Base class for all package errors."""


class InvalidDimensionError(StipError):
    """Operand shapes are inconsistent or a dimension is out of range."""


class InvalidConfigError(StipError):
    """A model or run configuration violates its invariants."""


class DegenerateRowError(StipError):
    """A softmax row was entirely -inf, leaving no probability mass."""


class UnknownTokenError(StipError):
    """A token id falls outside the embedding table."""


class MissingWeightError(StipError):
    """A layer lacks a weight the requested computation needs (e.g. W_3)."""


class CodecError(StipError):
    """Bad magic, unsupported version, or truncated/overlong serialized data."""


class ProtocolError(StipError):
    """A party received a frame it cannot act on."""


class StaleEpochError(ProtocolError):
    """Message epoch does not match the session's current key epoch."""


class NotInitializedError(ProtocolError):
    """A party was asked to act before its keys/model were deployed."""


class TransportError(StipError):
    """The underlying channel failed (closed, timed out, refused)."""


class AbortedGenerationError(StipError):
    """Generation stopped early; carries the tokens produced so far."""

    def __init__(self, message, tokens):
        super().__init__(message)
        self.tokens = list(tokens)


class InsufficientSamplesError(StipError):
    """Too few observations for a statistical estimate."""


class KeyspaceTooLargeError(StipError):
    """Refusal to enumerate a factorial keyspace beyond the configured cap."""
