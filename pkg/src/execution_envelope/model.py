"""Core data model for phase-tagged execution admission envelopes.

An envelope is built once, at admission, and never rewritten: lifecycle
transitions (see ``lifecycle``) return new values that add backend-truth
fields on top of the admission-time families. The dataclasses here are
deliberately inert containers so that hostile or decoded data can be
represented; everything that can be wrong with an envelope is reported by
``check_invariants``, and the constructors used on the hot path
(``build_admission``, ``annotate``) refuse to return a value that would
not pass it.

Field families:

* ``caller``      - normalized requester identity and request metadata
* ``execution``   - what kind of execution is being asked for, and where
* ``scope``       - optional workspace/app/job/session/thread context
* ``governance``  - optional audit/sensitivity/provenance hints
* ``resources_requested`` - the caller's original ask (immutable)
* ``resources_granted``   - the backend-validated allocation (additive)
* ``resolution``  - backend class, routing, and final deployment identity

Service-specific data rides in namespaced extension blocks, never in the
core families.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from datetime import datetime
from enum import Enum
from typing import Iterable, Mapping, Sequence, Union

from .errors import (
    DuplicateAnnotation,
    InvalidCaller,
    InvalidExecution,
    InvalidExtension,
    InvalidNamespace,
    InvalidResources,
    NamespaceCollision,
)
from .ids import new_envelope_id, utc_now_ms

ExtensionScalar = Union[str, int, bool]
ExtensionValue = Union[ExtensionScalar, tuple[str, ...]]

# Wire names of the seven core field families. Extension namespaces must
# never collide with these.
CORE_FAMILY_NAMES = frozenset(
    {"caller", "execution", "scope", "governance", "requested", "granted", "resolution"}
)

REQUESTER_URN_RE = re.compile(
    r"^urn:(user|service):[a-z0-9][a-z0-9_-]*:[A-Za-z0-9][A-Za-z0-9._-]*$"
)
NAMESPACE_RE = re.compile(r"^[a-z][a-z0-9_]*(\.[a-z][a-z0-9_]*)*$")
HANDOFF_KEY_RE = re.compile(r"^[a-z][a-z0-9_]*(\.[a-z][a-z0-9_]*)+$")

PRIORITY_MIN = 0
PRIORITY_MAX = 100


class ExecutionKind(str, Enum):
    DEPLOYMENT = "deployment"
    INFERENCE = "inference"
    PIPELINE_STEP = "pipeline_step"
    TOOL_EXECUTION = "tool_execution"
    DATA_MOVEMENT = "data_movement"
    MAINTENANCE_TASK = "maintenance_task"


class LifecyclePhase(str, Enum):
    ADMISSION = "admission"
    RESOLVED = "resolved"
    FINALIZED = "finalized"
    FAILED = "failed"


class FailureStage(str, Enum):
    ADMISSION = "admission"
    VALIDATION = "validation"
    RESOLUTION = "resolution"
    FINALIZATION = "finalization"


class AuditLevel(str, Enum):
    NONE = "none"
    STANDARD = "standard"
    DETAILED = "detailed"


# Failure stages that imply the grant was recorded before the failure.
GRANT_BEARING_STAGES = frozenset({FailureStage.RESOLUTION, FailureStage.FINALIZATION})


@dataclass(frozen=True, slots=True)
class CallerIdentity:
    """Who asked: normalized principal, tenant, and transport correlation.

    ``admitted_at`` is stamped by ``build_admission`` when left ``None``;
    it is set exactly once and never changes across phases.
    """

    requester_urn: str
    tenant: str
    request_id: str
    admitted_at: datetime | None = None


@dataclass(frozen=True, slots=True)
class ExecutionDescriptor:
    """What is being asked for: kind, source service, and operation name."""

    kind: ExecutionKind
    service: str
    operation: str


@dataclass(frozen=True, slots=True)
class ScopeRefs:
    """Optional product-context identifiers. An empty scope is valid."""

    workspace_id: str | None = None
    app_id: str | None = None
    job_id: str | None = None
    session_id: str | None = None
    thread_id: str | None = None
    deployment_group_id: str | None = None
    template_id: str | None = None

    def is_empty(self) -> bool:
        return all(
            getattr(self, name) is None for name in self.__dataclass_fields__
        )


@dataclass(frozen=True, slots=True)
class GovernanceHints:
    """Optional policy-surface hints; all advisory, none decisive."""

    audit_level: AuditLevel | None = None
    sensitivity_tag: str | None = None
    provenance: str | None = None
    guardrail_hint: str | None = None
    audit_event: str | None = None

    def is_empty(self) -> bool:
        return all(
            getattr(self, name) is None for name in self.__dataclass_fields__
        )


# Dimension names split by comparison semantics; drift reporting and
# accounting both key off these tuples.
NUMERIC_DIMENSIONS = (
    "gpu_count",
    "cpu_millicores",
    "memory_mb",
    "concurrency",
    "timeout_seconds",
    "priority",
)
STRING_DIMENSIONS = ("engine", "placement_preference")
RESOURCE_DIMENSIONS = NUMERIC_DIMENSIONS + STRING_DIMENSIONS


@dataclass(frozen=True, slots=True)
class ResourceVector:
    """A structured resource ask or grant.

    Every field is independently optional; numeric fields are whole units
    (gpu_count counts whole GPU-equivalents). Validity ranges: gpu_count,
    cpu_millicores, memory_mb >= 0; concurrency, timeout_seconds >= 1;
    priority in [0, 100].
    """

    gpu_count: int | None = None
    cpu_millicores: int | None = None
    memory_mb: int | None = None
    concurrency: int | None = None
    timeout_seconds: int | None = None
    priority: int | None = None
    engine: str | None = None
    placement_preference: str | None = None

    def dimensions(self) -> dict[str, int | str]:
        """Present dimensions only, in declaration order."""
        out: dict[str, int | str] = {}
        for name in RESOURCE_DIMENSIONS:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    def is_empty(self) -> bool:
        return not self.dimensions()


@dataclass(frozen=True, slots=True)
class ResolutionRecord:
    """Backend-truth facts attached after validation.

    ``deployment_id``, ``serve_path``, and ``public_path`` belong to the
    finalized phase only. ``handoff_metadata`` keys are dotted namespaced
    strings, append-only like extensions.
    """

    backend: str
    routing_method: str | None = None
    actor_binding: str | None = None
    deployment_id: str | None = None
    serve_path: str | None = None
    public_path: str | None = None
    handoff_metadata: Mapping[str, str] | None = None

    def final_identity_fields(self) -> dict[str, str | None]:
        return {
            "deployment_id": self.deployment_id,
            "serve_path": self.serve_path,
            "public_path": self.public_path,
        }


@dataclass(frozen=True, slots=True)
class FailureRecord:
    """Why and where a request failed; present iff phase=failed."""

    stage: FailureStage
    reason: str
    code: str


@dataclass(frozen=True, slots=True)
class ExtensionBlock:
    """Namespaced service-specific annotations.

    Entries are append-only: a (namespace, key) pair is written at most
    once. Values are scalars (str, int, bool) or tuples of strings.
    """

    namespace: str
    entries: Mapping[str, ExtensionValue]


@dataclass(frozen=True, slots=True)
class ExecutionEnvelope:
    """One admitted execution request at a specific lifecycle phase.

    The admission families (caller, execution, scope, governance,
    resources_requested) are byte-identical across every phase of the
    same envelope_id; later phases only add granted/resolution/failure.
    """

    envelope_id: str
    phase: LifecyclePhase
    caller: CallerIdentity
    execution: ExecutionDescriptor
    scope: ScopeRefs
    governance: GovernanceHints
    resources_requested: ResourceVector
    resources_granted: ResourceVector | None = None
    resolution: ResolutionRecord | None = None
    failure: FailureRecord | None = None
    extensions: tuple[ExtensionBlock, ...] = ()


# ---------------------------------------------------------------------------
# Validation report


@dataclass(frozen=True, slots=True)
class Violation:
    """One violated invariant: machine code, JSON-pointer path, and detail."""

    code: str
    path: str
    message: str


@dataclass(frozen=True, slots=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> tuple[str, ...]:
        return tuple(v.code for v in self.violations)

    def __iter__(self):
        return iter(self.violations)

    def __len__(self) -> int:
        return len(self.violations)


# Violation codes. PHASE_FIELD_VIOLATION and GRANT_WITHOUT_RESOLUTION are
# part of the external contract (CLI output, decode errors); the rest are
# stable but package-local.
EMPTY_ENVELOPE_ID = "EMPTY_ENVELOPE_ID"
INVALID_PHASE = "INVALID_PHASE"
INVALID_URN = "INVALID_URN"
EMPTY_CALLER_FIELD = "EMPTY_CALLER_FIELD"
MISSING_ADMITTED_AT = "MISSING_ADMITTED_AT"
INVALID_KIND = "INVALID_KIND"
EMPTY_EXECUTION_FIELD = "EMPTY_EXECUTION_FIELD"
INVALID_AUDIT_LEVEL = "INVALID_AUDIT_LEVEL"
RESOURCE_RANGE = "RESOURCE_RANGE"
EMPTY_REQUESTED_ASK = "EMPTY_REQUESTED_ASK"
EMPTY_GRANT = "EMPTY_GRANT"
PHASE_FIELD_VIOLATION = "PHASE_FIELD_VIOLATION"
GRANT_WITHOUT_RESOLUTION = "GRANT_WITHOUT_RESOLUTION"
MISSING_BACKEND = "MISSING_BACKEND"
FINALIZED_ONLY_FIELD = "FINALIZED_ONLY_FIELD"
MISSING_FINAL_IDENTITY = "MISSING_FINAL_IDENTITY"
INVALID_HANDOFF_KEY = "INVALID_HANDOFF_KEY"
INVALID_FAILURE_STAGE = "INVALID_FAILURE_STAGE"
EMPTY_FAILURE_FIELD = "EMPTY_FAILURE_FIELD"
INVALID_NAMESPACE = "INVALID_NAMESPACE"
NAMESPACE_COLLISION = "NAMESPACE_COLLISION"
DUPLICATE_NAMESPACE = "DUPLICATE_NAMESPACE"
EMPTY_EXTENSION_KEY = "EMPTY_EXTENSION_KEY"
INVALID_EXTENSION_VALUE = "INVALID_EXTENSION_VALUE"


def _is_nonempty_str(value) -> bool:
    return isinstance(value, str) and bool(value)


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _check_vector(vector: ResourceVector, family: str, out: list[Violation]) -> None:
    bounds = {
        "gpu_count": (0, None),
        "cpu_millicores": (0, None),
        "memory_mb": (0, None),
        "concurrency": (1, None),
        "timeout_seconds": (1, None),
        "priority": (PRIORITY_MIN, PRIORITY_MAX),
    }
    for name, (low, high) in bounds.items():
        value = getattr(vector, name)
        if value is None:
            continue
        if not _is_int(value) or value < low or (high is not None and value > high):
            out.append(
                Violation(
                    RESOURCE_RANGE,
                    f"/{family}/{name}",
                    f"{name} must be an integer in [{low}, {high if high is not None else 'inf'}], got {value!r}",
                )
            )
    for name in STRING_DIMENSIONS:
        value = getattr(vector, name)
        if value is not None and not _is_nonempty_str(value):
            out.append(
                Violation(
                    RESOURCE_RANGE, f"/{family}/{name}", f"{name} must be a non-empty string"
                )
            )


def _check_extension_value(value) -> bool:
    if isinstance(value, bool) or isinstance(value, str):
        return True
    if isinstance(value, int):
        return True
    if isinstance(value, (tuple, list)):
        return all(isinstance(item, str) for item in value)
    return False


def _check_extensions(extensions: Sequence[ExtensionBlock], out: list[Violation]) -> None:
    seen: set[str] = set()
    for index, block in enumerate(extensions):
        base = f"/extensions/{index}"
        ns = block.namespace
        if not _is_nonempty_str(ns) or NAMESPACE_RE.match(ns) is None:
            out.append(
                Violation(INVALID_NAMESPACE, f"{base}/namespace", f"bad namespace {ns!r}")
            )
            continue
        if ns in CORE_FAMILY_NAMES:
            out.append(
                Violation(
                    NAMESPACE_COLLISION,
                    f"{base}/namespace",
                    f"namespace {ns!r} collides with a core family",
                )
            )
        if ns in seen:
            out.append(
                Violation(
                    DUPLICATE_NAMESPACE, f"{base}/namespace", f"duplicate namespace {ns!r}"
                )
            )
        seen.add(ns)
        for key, value in block.entries.items():
            if not _is_nonempty_str(key):
                out.append(
                    Violation(EMPTY_EXTENSION_KEY, f"{base}/entries", "empty entry key")
                )
                continue
            if not _check_extension_value(value):
                out.append(
                    Violation(
                        INVALID_EXTENSION_VALUE,
                        f"{base}/entries/{key}",
                        "value must be a scalar or a list of strings",
                    )
                )


def _check_resolution(
    resolution: ResolutionRecord, phase: LifecyclePhase, out: list[Violation]
) -> None:
    if not _is_nonempty_str(resolution.backend):
        out.append(Violation(MISSING_BACKEND, "/resolution/backend", "backend must be set"))
    final_fields = resolution.final_identity_fields()
    if phase == LifecyclePhase.FINALIZED:
        for name, value in final_fields.items():
            if not _is_nonempty_str(value):
                out.append(
                    Violation(
                        MISSING_FINAL_IDENTITY,
                        f"/resolution/{name}",
                        f"finalized envelope must carry {name}",
                    )
                )
    else:
        for name, value in final_fields.items():
            if value is not None:
                out.append(
                    Violation(
                        FINALIZED_ONLY_FIELD,
                        f"/resolution/{name}",
                        f"{name} belongs to the finalized phase only",
                    )
                )
    if resolution.handoff_metadata is not None:
        for key, value in resolution.handoff_metadata.items():
            if not _is_nonempty_str(key) or HANDOFF_KEY_RE.match(key) is None:
                out.append(
                    Violation(
                        INVALID_HANDOFF_KEY,
                        "/resolution/handoff_metadata",
                        f"handoff key {key!r} must be dotted and namespaced",
                    )
                )
            elif not _is_nonempty_str(value):
                out.append(
                    Violation(
                        INVALID_HANDOFF_KEY,
                        f"/resolution/handoff_metadata/{key}",
                        "handoff values must be non-empty strings",
                    )
                )


def _coerce_phase(value) -> LifecyclePhase | None:
    if isinstance(value, LifecyclePhase):
        return value
    try:
        return LifecyclePhase(value)
    except ValueError:
        return None


def _coerce_stage(value) -> FailureStage | None:
    if isinstance(value, FailureStage):
        return value
    try:
        return FailureStage(value)
    except ValueError:
        return None


def _check_phase_fields(
    envelope: ExecutionEnvelope, phase: LifecyclePhase, out: list[Violation]
) -> None:
    """Enforce the per-phase presence table for granted/resolution/failure."""
    granted = envelope.resources_granted is not None
    resolution = envelope.resolution is not None
    failure = envelope.failure is not None

    def require(present: bool, expected: bool, family: str) -> None:
        if present == expected:
            return
        detail = "must be present" if expected else "must be absent"
        out.append(
            Violation(PHASE_FIELD_VIOLATION, f"/{family}", f"{family} {detail} at phase={phase.value}")
        )

    if phase == LifecyclePhase.ADMISSION:
        require(granted, False, "granted")
        require(resolution, False, "resolution")
        require(failure, False, "failure")
    elif phase in (LifecyclePhase.RESOLVED, LifecyclePhase.FINALIZED):
        require(granted, True, "granted")
        require(resolution, True, "resolution")
        require(failure, False, "failure")
    elif phase == LifecyclePhase.FAILED:
        if not failure:
            require(failure, True, "failure")
            return
        stage = _coerce_stage(envelope.failure.stage)
        if stage is None:
            # Unknown stage is reported by the failure-record audit; the
            # conditional presence rules cannot be evaluated without it.
            return
        if stage in GRANT_BEARING_STAGES:
            require(granted, True, "granted")
            require(resolution, True, "resolution")
        else:
            if granted:
                out.append(
                    Violation(
                        GRANT_WITHOUT_RESOLUTION,
                        "/granted",
                        f"failure at stage={stage.value} cannot carry granted resources",
                    )
                )
            require(resolution, False, "resolution")


def check_invariants(envelope: ExecutionEnvelope) -> ValidationReport:
    """Audit an envelope against every contract invariant.

    Pure function over arbitrary (possibly hostile) envelope values;
    violations are returned as data, never raised. An empty report means
    the envelope is valid at its declared phase.
    """
    out: list[Violation] = []

    if not _is_nonempty_str(envelope.envelope_id):
        out.append(Violation(EMPTY_ENVELOPE_ID, "/envelope_id", "envelope_id must be set"))
    phase = _coerce_phase(envelope.phase)
    if phase is None:
        out.append(Violation(INVALID_PHASE, "/phase", f"unknown phase {envelope.phase!r}"))
        return ValidationReport(tuple(out))

    caller = envelope.caller
    if not _is_nonempty_str(caller.requester_urn) or REQUESTER_URN_RE.match(
        caller.requester_urn
    ) is None:
        out.append(
            Violation(
                INVALID_URN,
                "/caller/requester_urn",
                f"requester_urn {caller.requester_urn!r} does not match "
                "urn:<user|service>:<tenant>:<local-id>",
            )
        )
    for name in ("tenant", "request_id"):
        if not _is_nonempty_str(getattr(caller, name)):
            out.append(
                Violation(EMPTY_CALLER_FIELD, f"/caller/{name}", f"{name} must be set")
            )
    if caller.admitted_at is None:
        out.append(
            Violation(MISSING_ADMITTED_AT, "/caller/admitted_at", "admitted_at must be set")
        )

    execution = envelope.execution
    if not isinstance(execution.kind, ExecutionKind):
        try:
            ExecutionKind(execution.kind)
        except ValueError:
            out.append(
                Violation(INVALID_KIND, "/execution/kind", f"unknown kind {execution.kind!r}")
            )
    for name in ("service", "operation"):
        if not _is_nonempty_str(getattr(execution, name)):
            out.append(
                Violation(EMPTY_EXECUTION_FIELD, f"/execution/{name}", f"{name} must be set")
            )

    governance = envelope.governance
    if governance.audit_level is not None and not isinstance(
        governance.audit_level, AuditLevel
    ):
        try:
            AuditLevel(governance.audit_level)
        except ValueError:
            out.append(
                Violation(
                    INVALID_AUDIT_LEVEL,
                    "/governance/audit_level",
                    f"unknown audit level {governance.audit_level!r}",
                )
            )

    _check_vector(envelope.resources_requested, "requested", out)
    if (
        envelope.resources_requested.is_empty()
        and _kind_is(execution.kind, ExecutionKind.DEPLOYMENT)
    ):
        out.append(
            Violation(
                EMPTY_REQUESTED_ASK,
                "/requested",
                "deployment requests must ask for at least one resource dimension",
            )
        )
    if envelope.resources_granted is not None:
        _check_vector(envelope.resources_granted, "granted", out)
        if envelope.resources_granted.is_empty():
            out.append(
                Violation(
                    EMPTY_GRANT, "/granted", "granted vector must carry at least one dimension"
                )
            )

    _check_phase_fields(envelope, phase, out)

    if envelope.resolution is not None:
        _check_resolution(envelope.resolution, phase, out)

    if envelope.failure is not None:
        fail = envelope.failure
        if _coerce_stage(fail.stage) is None:
            out.append(
                Violation(
                    INVALID_FAILURE_STAGE,
                    "/failure/stage",
                    f"unknown failure stage {fail.stage!r}",
                )
            )
        for name in ("reason", "code"):
            if not _is_nonempty_str(getattr(fail, name)):
                out.append(
                    Violation(EMPTY_FAILURE_FIELD, f"/failure/{name}", f"{name} must be set")
                )

    _check_extensions(envelope.extensions, out)

    return ValidationReport(tuple(out))


def _kind_is(kind, expected: ExecutionKind) -> bool:
    if isinstance(kind, ExecutionKind):
        return kind == expected
    return kind == expected.value


# Codes mapped to the typed error raised by build_admission when the
# candidate envelope fails its own audit.
_CALLER_CODES = {INVALID_URN, EMPTY_CALLER_FIELD, MISSING_ADMITTED_AT}
_EXECUTION_CODES = {INVALID_KIND, EMPTY_EXECUTION_FIELD}
_RESOURCE_CODES = {RESOURCE_RANGE, EMPTY_REQUESTED_ASK, EMPTY_GRANT}
_COLLISION_CODES = {NAMESPACE_COLLISION, DUPLICATE_NAMESPACE}
_NAMESPACE_CODES = {INVALID_NAMESPACE}
_EXTENSION_CODES = {EMPTY_EXTENSION_KEY, INVALID_EXTENSION_VALUE}


def _raise_for(report: ValidationReport) -> None:
    for violation in report:
        message = f"{violation.path}: {violation.message}"
        if violation.code in _CALLER_CODES:
            raise InvalidCaller(message)
        if violation.code in _EXECUTION_CODES:
            raise InvalidExecution(message)
        if violation.code in _RESOURCE_CODES:
            raise InvalidResources(message)
        if violation.code in _COLLISION_CODES:
            raise NamespaceCollision(message)
        if violation.code in _NAMESPACE_CODES:
            raise InvalidNamespace(message)
        if violation.code in _EXTENSION_CODES:
            raise InvalidExtension(message)
    first = report.violations[0]
    raise InvalidResources(f"{first.path}: {first.message}")


def _normalize_extensions(
    extensions: Iterable[ExtensionBlock],
) -> tuple[ExtensionBlock, ...]:
    """Copy blocks with tuple-normalized values, sorted by namespace."""
    normalized = []
    for block in extensions:
        entries: dict[str, ExtensionValue] = {}
        for key, value in block.entries.items():
            entries[key] = tuple(value) if isinstance(value, list) else value
        normalized.append(ExtensionBlock(namespace=block.namespace, entries=entries))
    return tuple(sorted(normalized, key=lambda b: b.namespace))


def build_admission(
    caller: CallerIdentity,
    execution: ExecutionDescriptor,
    requested: ResourceVector,
    *,
    scope: ScopeRefs | None = None,
    governance: GovernanceHints | None = None,
    extensions: Iterable[ExtensionBlock] = (),
    envelope_id: str | None = None,
    admitted_at: datetime | None = None,
) -> ExecutionEnvelope:
    """Admit a request: build a phase=admission envelope.

    Stamps ``admitted_at`` (construction time, millisecond precision) and
    a fresh sortable envelope id unless explicit values are supplied
    (replay and fixtures need pinned identities). Raises a typed error if
    any admission-time invariant would be violated; an envelope returned
    from here always passes ``check_invariants``.
    """
    if isinstance(execution.kind, str) and not isinstance(execution.kind, ExecutionKind):
        try:
            execution = replace(execution, kind=ExecutionKind(execution.kind))
        except ValueError:
            raise InvalidExecution(f"unknown execution kind {execution.kind!r}") from None

    stamp = admitted_at if admitted_at is not None else caller.admitted_at
    if stamp is None:
        stamp = utc_now_ms()
    caller = replace(caller, admitted_at=stamp)

    envelope = ExecutionEnvelope(
        envelope_id=envelope_id if envelope_id is not None else new_envelope_id(),
        phase=LifecyclePhase.ADMISSION,
        caller=caller,
        execution=execution,
        scope=scope if scope is not None else ScopeRefs(),
        governance=governance if governance is not None else GovernanceHints(),
        resources_requested=requested,
        extensions=_normalize_extensions(extensions),
    )
    report = check_invariants(envelope)
    if not report.ok:
        _raise_for(report)
    return envelope


def annotate(
    envelope: ExecutionEnvelope, namespace: str, key: str, value: ExtensionValue
) -> ExecutionEnvelope:
    """Attach one namespaced annotation; everything else stays untouched.

    Entries are append-only: re-annotating an existing (namespace, key)
    raises ``DuplicateAnnotation`` rather than overwriting.
    """
    if not _is_nonempty_str(namespace) or NAMESPACE_RE.match(namespace) is None:
        raise InvalidNamespace(f"bad namespace {namespace!r}")
    if namespace in CORE_FAMILY_NAMES:
        raise NamespaceCollision(f"namespace {namespace!r} collides with a core family")
    if not _is_nonempty_str(key):
        raise InvalidExtension("entry key must be a non-empty string")
    if isinstance(value, list):
        value = tuple(value)
    if not _check_extension_value(value):
        raise InvalidExtension("value must be a scalar or a list of strings")

    blocks = list(envelope.extensions)
    for index, block in enumerate(blocks):
        if block.namespace != namespace:
            continue
        if key in block.entries:
            raise DuplicateAnnotation(f"({namespace!r}, {key!r}) already written")
        entries = dict(block.entries)
        entries[key] = value
        blocks[index] = ExtensionBlock(namespace=namespace, entries=entries)
        return replace(envelope, extensions=tuple(blocks))

    blocks.append(ExtensionBlock(namespace=namespace, entries={key: value}))
    blocks.sort(key=lambda b: b.namespace)
    return replace(envelope, extensions=tuple(blocks))
