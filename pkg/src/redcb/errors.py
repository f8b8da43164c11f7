"""Exception taxonomy shared by every redcb module.

Callers are expected to catch these by class; the CLI maps a few of them
to dedicated exit codes.
"""


class RedcbError(Exception):
    """Base class for all package-specific failures."""


class InvalidInput(RedcbError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(InvalidInput):
    """An array has the wrong rank or incompatible dimensions."""


class AlignmentError(InvalidInput):
    """Two distributions or logit sets disagree on candidate ids."""


class MissingCandidateError(RedcbError, LookupError):
    """A required candidate id is absent from a logit set."""


class MissingRecordError(RedcbError, LookupError):
    """A replay store has no record for the requested key."""


class CorruptStoreError(RedcbError, RuntimeError):
    """A persisted store fails structural or checksum validation."""


class UnsupportedVersion(CorruptStoreError):
    """A persisted store declares a format version this build cannot read."""


class ConsistencyError(RedcbError, RuntimeError):
    """Cross-referenced inputs disagree (e.g. records without embeddings)."""


class EmptyCandidateSet(RedcbError, RuntimeError):
    """Candidate selection or filtering produced nothing to work with."""


class RangeError(RedcbError, OverflowError):
    """An exact integer result exceeds the supported 64-bit range."""
