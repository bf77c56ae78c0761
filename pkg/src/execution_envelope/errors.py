"""Exception hierarchy for envelope construction, lifecycle, codec, and storage."""

from __future__ import annotations


class EnvelopeError(Exception):
    """Base class for every error raised by this package."""


# ---------------------------------------------------------------------------
# Admission-time construction


class InvalidCaller(EnvelopeError):
    """Caller identity missing, empty, or not matching the URN grammar."""


class InvalidExecution(EnvelopeError):
    """Execution descriptor with an unknown kind or empty service/operation."""


class InvalidResources(EnvelopeError):
    """Resource vector out of range, or an empty ask where one is required."""


class NamespaceCollision(EnvelopeError):
    """Extension namespace collides with a core family name or another block."""


class InvalidNamespace(EnvelopeError):
    """Extension namespace does not match the namespace grammar."""


class InvalidExtension(EnvelopeError):
    """Extension entry with an empty key or a non-scalar, non-string-list value."""


class DuplicateAnnotation(EnvelopeError):
    """The (namespace, key) pair already exists; entries are append-only."""


# ---------------------------------------------------------------------------
# Lifecycle transitions


class IllegalTransition(EnvelopeError):
    """Requested phase change is not one of the four legal transitions."""


class PrematureFinalization(EnvelopeError):
    """Resolution carries finalized-only identifiers before finalization."""


class MissingBackend(EnvelopeError):
    """Resolution record without a backend class."""


class EmptyIdentity(EnvelopeError):
    """Finalization identifier (deployment id or path) is empty."""


class StagePhaseMismatch(EnvelopeError):
    """Failure stage is not legal for the envelope's current phase."""


class NoGrant(EnvelopeError):
    """Operation needs resources_granted but the envelope carries none."""


# ---------------------------------------------------------------------------
# Codec


class CodecError(EnvelopeError):
    """Base class for encode/decode failures."""


class MalformedDocument(CodecError):
    """Input is not UTF-8 or not JSON."""


class SchemaViolation(CodecError):
    """Structurally invalid document; ``path`` is a JSON pointer to the offender."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.reason = message


class InvariantViolation(CodecError):
    """Well-typed document that breaks a contract invariant.

    Carries the full validation report so callers can surface every
    violated invariant, not only the first.
    """

    def __init__(self, report):
        first = report.violations[0]
        super().__init__(f"{first.path}: {first.code} {first.message}")
        self.report = report


class InvalidEnvelope(CodecError):
    """Refused to encode an envelope that fails its own invariants."""

    def __init__(self, report):
        first = report.violations[0]
        super().__init__(f"{first.path}: {first.code} {first.message}")
        self.report = report


# ---------------------------------------------------------------------------
# Event store


class StoreError(EnvelopeError):
    """Base class for event-store rejections."""


class IllegalChain(StoreError):
    """Appended phase does not legally follow the stored tail."""


class AdmissionFirst(StoreError):
    """First event for an envelope id must carry phase=admission."""


class TerminalEnvelope(StoreError):
    """Append attempted after a finalized or failed event."""


class ImmutabilityBreach(StoreError):
    """Admission-time families differ byte-wise from the sequence-0 snapshot."""


class BrokenChain(StoreError):
    """Event list is empty, out of order, or phase-illegal."""


class SnapshotMismatch(StoreError):
    """An event snapshot is not producible from its predecessor by one transition."""


# ---------------------------------------------------------------------------
# Mock resolver


class ResolverError(EnvelopeError):
    """Base class for mock-backend validation failures."""

    code = "RESOLVER_ERROR"


class EngineUnknown(ResolverError):
    """Requested engine is not in the configured catalog."""

    code = "ENGINE_UNKNOWN"


class PlacementDenied(ResolverError):
    """Requested placement preference is on the deny list."""

    code = "PLACEMENT_DENIED"


class GpuCapExceeded(ResolverError):
    """GPU ask exceeds the engine's hard cap and narrowing is disabled."""

    code = "GPU_CAP_EXCEEDED"
