"""Execution envelopes: normalized, phase-tagged admission records.

One internal object per admitted backend request, preserving the caller's
original resource ask next to the backend's grant under a stable
identity, with an enforced four-phase lifecycle, canonical encoding, an
append-only event store, reference consumers, a deploy-model proving
gateway, and the ``envelopectl`` CLI.
"""

from .errors import (
    AdmissionFirst,
    BrokenChain,
    CodecError,
    DuplicateAnnotation,
    EmptyIdentity,
    EngineUnknown,
    EnvelopeError,
    GpuCapExceeded,
    IllegalChain,
    IllegalTransition,
    ImmutabilityBreach,
    InvalidCaller,
    InvalidEnvelope,
    InvalidExecution,
    InvalidExtension,
    InvalidNamespace,
    InvalidResources,
    InvariantViolation,
    MalformedDocument,
    MissingBackend,
    NamespaceCollision,
    NoGrant,
    PlacementDenied,
    PrematureFinalization,
    SchemaViolation,
    SnapshotMismatch,
    StagePhaseMismatch,
    StoreError,
    TerminalEnvelope,
)
from .model import (
    AuditLevel,
    CallerIdentity,
    ExecutionDescriptor,
    ExecutionEnvelope,
    ExecutionKind,
    ExtensionBlock,
    FailureRecord,
    FailureStage,
    GovernanceHints,
    LifecyclePhase,
    ResolutionRecord,
    ResourceVector,
    ScopeRefs,
    ValidationReport,
    Violation,
    annotate,
    build_admission,
    check_invariants,
)
from .lifecycle import (
    DriftRelation,
    DriftReport,
    diff_requested_granted,
    fail,
    finalize,
    is_legal_transition,
    resolve,
)
from .codec import (
    decode,
    encode_canonical,
    generate_schema,
    validate_document,
    validate_schema,
)
from .store import EventStore, FileEventStore, InMemoryEventStore, PhaseEvent, replay
from .consumers import AccountingSummary, LogEmitter, aggregate, emit_log
from .gateway import (
    DeployModelRequest,
    EngineSpec,
    GatewayConfig,
    ResolverConfig,
    create_app,
    load_config,
    resolve_mock,
)

__version__ = "0.1.0"
