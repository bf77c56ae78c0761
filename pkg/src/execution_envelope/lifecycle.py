"""Four-phase lifecycle transitions and requested-vs-granted drift.

Transitions never mutate: each returns a new envelope value that keeps
every admission-time family identical and only adds backend-truth facts.
The legal moves are exactly::

    admission -> resolved -> finalized
    admission -> failed
    resolved  -> failed

A failed envelope preserves a grant only when one was actually recorded
(failure stage resolution/finalization); failures before resolution never
carry granted resources.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping

from .errors import (
    EmptyIdentity,
    IllegalTransition,
    InvalidResources,
    MissingBackend,
    NoGrant,
    PrematureFinalization,
    StagePhaseMismatch,
)
from .model import (
    ExecutionEnvelope,
    FailureRecord,
    FailureStage,
    LifecyclePhase,
    NUMERIC_DIMENSIONS,
    RESOURCE_DIMENSIONS,
    ResolutionRecord,
    ResourceVector,
)

LEGAL_TRANSITIONS = frozenset(
    {
        (LifecyclePhase.ADMISSION, LifecyclePhase.RESOLVED),
        (LifecyclePhase.RESOLVED, LifecyclePhase.FINALIZED),
        (LifecyclePhase.ADMISSION, LifecyclePhase.FAILED),
        (LifecyclePhase.RESOLVED, LifecyclePhase.FAILED),
    }
)

# Which failure stages may be recorded from which phase.
LEGAL_FAIL_STAGES = {
    LifecyclePhase.ADMISSION: frozenset({FailureStage.ADMISSION, FailureStage.VALIDATION}),
    LifecyclePhase.RESOLVED: frozenset({FailureStage.RESOLUTION, FailureStage.FINALIZATION}),
}


def is_legal_transition(source: LifecyclePhase, target: LifecyclePhase) -> bool:
    """True exactly for the four legal phase pairs."""
    return (source, target) in LEGAL_TRANSITIONS


def resolve(
    envelope: ExecutionEnvelope,
    granted: ResourceVector,
    resolution: ResolutionRecord,
) -> ExecutionEnvelope:
    """Record backend resolution: granted resources plus routing facts.

    Only legal from admission. The resolution record must name a backend
    and must not yet carry the finalized-only identifiers (deployment id,
    serve path, public path).
    """
    if envelope.phase != LifecyclePhase.ADMISSION:
        raise IllegalTransition(
            f"resolve requires phase=admission, envelope is {envelope.phase.value}"
        )
    if not resolution.backend:
        raise MissingBackend("resolution must name a backend")
    premature = [
        name for name, value in resolution.final_identity_fields().items() if value is not None
    ]
    if premature:
        raise PrematureFinalization(
            f"resolution carries finalized-only fields: {', '.join(premature)}"
        )
    if granted.is_empty():
        raise InvalidResources("granted vector must carry at least one dimension")
    return replace(
        envelope,
        phase=LifecyclePhase.RESOLVED,
        resources_granted=granted,
        resolution=resolution,
    )


def finalize(
    envelope: ExecutionEnvelope,
    deployment_id: str,
    serve_path: str,
    public_path: str,
) -> ExecutionEnvelope:
    """Attach concrete runtime identity; terminal success.

    Extends the resolution record with the three identifiers and leaves
    every earlier field unchanged.
    """
    if envelope.phase != LifecyclePhase.RESOLVED:
        raise IllegalTransition(
            f"finalize requires phase=resolved, envelope is {envelope.phase.value}"
        )
    for name, value in (
        ("deployment_id", deployment_id),
        ("serve_path", serve_path),
        ("public_path", public_path),
    ):
        if not value:
            raise EmptyIdentity(f"{name} must be non-empty")
    resolution = replace(
        envelope.resolution,
        deployment_id=deployment_id,
        serve_path=serve_path,
        public_path=public_path,
    )
    return replace(envelope, phase=LifecyclePhase.FINALIZED, resolution=resolution)


def fail(
    envelope: ExecutionEnvelope,
    stage: FailureStage,
    reason: str,
    code: str,
) -> ExecutionEnvelope:
    """Record failure with a durable identity; terminal.

    The grant recorded at resolution (if any) is preserved exactly -
    a failure never invents a grant and never erases one that existed.
    """
    if envelope.phase not in LEGAL_FAIL_STAGES:
        raise IllegalTransition(
            f"fail requires phase in {{admission, resolved}}, envelope is {envelope.phase.value}"
        )
    if isinstance(stage, str) and not isinstance(stage, FailureStage):
        try:
            stage = FailureStage(stage)
        except ValueError:
            raise StagePhaseMismatch(f"unknown failure stage {stage!r}") from None
    if stage not in LEGAL_FAIL_STAGES[envelope.phase]:
        raise StagePhaseMismatch(
            f"stage={stage.value} is not legal from phase={envelope.phase.value}"
        )
    if not reason or not code:
        raise ValueError("failure reason and code must be non-empty")
    return replace(
        envelope,
        phase=LifecyclePhase.FAILED,
        failure=FailureRecord(stage=stage, reason=reason, code=code),
    )


class DriftRelation(str, Enum):
    EQUAL = "equal"
    NARROWED = "narrowed"
    WIDENED = "widened"
    ADDED_BY_BACKEND = "added_by_backend"
    DROPPED_BY_BACKEND = "dropped_by_backend"
    REBOUND = "rebound"


@dataclass(frozen=True, slots=True)
class DimensionDrift:
    requested: int | str | None
    granted: int | str | None
    relation: DriftRelation


@dataclass(frozen=True, slots=True)
class DriftReport:
    """Per-dimension comparison of the original ask and the grant."""

    envelope_id: str
    per_dimension: Mapping[str, DimensionDrift]

    def relations(self) -> dict[str, str]:
        return {name: drift.relation.value for name, drift in self.per_dimension.items()}


def _relate(dimension: str, requested, granted) -> DriftRelation:
    if requested is None:
        return DriftRelation.ADDED_BY_BACKEND
    if granted is None:
        return DriftRelation.DROPPED_BY_BACKEND
    if requested == granted:
        return DriftRelation.EQUAL
    if dimension in NUMERIC_DIMENSIONS:
        return DriftRelation.NARROWED if granted < requested else DriftRelation.WIDENED
    return DriftRelation.REBOUND


def diff_requested_granted(envelope: ExecutionEnvelope) -> DriftReport:
    """Compute drift between requested and granted resources.

    Requires a grant: legal for resolved, finalized, and failed-with-grant
    envelopes. Every dimension present on either side gets an entry.
    """
    granted_vector = envelope.resources_granted
    if granted_vector is None:
        raise NoGrant(f"envelope {envelope.envelope_id} carries no granted resources")
    requested = envelope.resources_requested.dimensions()
    granted = granted_vector.dimensions()
    per_dimension: dict[str, DimensionDrift] = {}
    for name in RESOURCE_DIMENSIONS:
        if name not in requested and name not in granted:
            continue
        req = requested.get(name)
        got = granted.get(name)
        per_dimension[name] = DimensionDrift(
            requested=req, granted=got, relation=_relate(name, req, got)
        )
    return DriftReport(envelope_id=envelope.envelope_id, per_dimension=per_dimension)
