"""Canonical byte encoding and structural validation for envelopes.

Canonical form rules (normative, bit-exact):

* UTF-8 JSON text, keys sorted lexicographically at every nesting level;
* no insignificant whitespace;
* integers in plain decimal, never exponent notation (floats never occur
  in an envelope document);
* timestamps as RFC 3339 UTC strings with exactly millisecond precision;
* absent optional fields and empty optional families are omitted
  entirely - a canonical document never contains ``null`` (``requested``
  is always present and may be empty for kinds without a resource ask);
* extension blocks appear sorted by namespace.

Wire naming: the resource families are encoded as ``requested`` and
``granted``; the in-memory model calls them ``resources_requested`` and
``resources_granted``. That is the only name mapping between the two.

The same field table drives the structural validator, ``decode``, and the
generated JSON Schema, so the shipped schema file cannot drift from the
code. Structural validation covers types, enums, ranges, and the
unconditional required keys; phase-conditional presence is semantic and
lives in ``model.check_invariants``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidEnvelope, InvariantViolation, MalformedDocument, SchemaViolation
from .ids import TIMESTAMP_RE, format_timestamp, parse_timestamp
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
    HANDOFF_KEY_RE,
    LifecyclePhase,
    NAMESPACE_RE,
    ResolutionRecord,
    ResourceVector,
    ScopeRefs,
    ValidationReport,
    Violation,
    check_invariants,
)

SCHEMA_FILENAME = "execution_envelope.schema.json"

# Structural violation codes (validate_schema findings).
UNKNOWN_KEY = "UNKNOWN_KEY"
MISSING_REQUIRED = "MISSING_REQUIRED"
TYPE_MISMATCH = "TYPE_MISMATCH"
ENUM_VIOLATION = "ENUM_VIOLATION"
VALUE_RANGE = "VALUE_RANGE"
EMPTY_STRING = "EMPTY_STRING"
BAD_TIMESTAMP = "BAD_TIMESTAMP"
BAD_PATTERN = "BAD_PATTERN"
NOT_JSON = "NOT_JSON"


def canonical_bytes(value) -> bytes:
    """Serialize a JSON-shaped value to canonical UTF-8 bytes."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    )


# ---------------------------------------------------------------------------
# Field table


@dataclass(frozen=True)
class _Field:
    json_type: str  # "string" | "integer"
    required: bool = False
    enum: tuple[str, ...] | None = None
    minimum: int | None = None
    maximum: int | None = None
    nonempty: bool = False
    timestamp: bool = False


def _enum_values(enum_cls) -> tuple[str, ...]:
    return tuple(member.value for member in enum_cls)


_CALLER_FIELDS = {
    "requester_urn": _Field("string", required=True, nonempty=True),
    "tenant": _Field("string", required=True, nonempty=True),
    "request_id": _Field("string", required=True, nonempty=True),
    "admitted_at": _Field("string", required=True, timestamp=True),
}

_EXECUTION_FIELDS = {
    "kind": _Field("string", required=True, enum=_enum_values(ExecutionKind)),
    "service": _Field("string", required=True, nonempty=True),
    "operation": _Field("string", required=True, nonempty=True),
}

_SCOPE_FIELDS = {
    name: _Field("string", nonempty=True)
    for name in (
        "workspace_id",
        "app_id",
        "job_id",
        "session_id",
        "thread_id",
        "deployment_group_id",
        "template_id",
    )
}

_GOVERNANCE_FIELDS = {
    "audit_level": _Field("string", enum=_enum_values(AuditLevel)),
    "sensitivity_tag": _Field("string", nonempty=True),
    "provenance": _Field("string", nonempty=True),
    "guardrail_hint": _Field("string", nonempty=True),
    "audit_event": _Field("string", nonempty=True),
}

_RESOURCE_FIELDS = {
    "gpu_count": _Field("integer", minimum=0),
    "cpu_millicores": _Field("integer", minimum=0),
    "memory_mb": _Field("integer", minimum=0),
    "concurrency": _Field("integer", minimum=1),
    "timeout_seconds": _Field("integer", minimum=1),
    "priority": _Field("integer", minimum=0, maximum=100),
    "engine": _Field("string", nonempty=True),
    "placement_preference": _Field("string", nonempty=True),
}

_RESOLUTION_FIELDS = {
    "backend": _Field("string", required=True, nonempty=True),
    "routing_method": _Field("string", nonempty=True),
    "actor_binding": _Field("string", nonempty=True),
    "deployment_id": _Field("string", nonempty=True),
    "serve_path": _Field("string", nonempty=True),
    "public_path": _Field("string", nonempty=True),
    # handoff_metadata is validated separately (string map, dotted keys).
}

_FAILURE_FIELDS = {
    "stage": _Field("string", required=True, enum=_enum_values(FailureStage)),
    "reason": _Field("string", required=True, nonempty=True),
    "code": _Field("string", required=True, nonempty=True),
}

_FAMILY_TABLES = {
    "caller": _CALLER_FIELDS,
    "execution": _EXECUTION_FIELDS,
    "scope": _SCOPE_FIELDS,
    "governance": _GOVERNANCE_FIELDS,
    "requested": _RESOURCE_FIELDS,
    "granted": _RESOURCE_FIELDS,
    "resolution": _RESOLUTION_FIELDS,
    "failure": _FAILURE_FIELDS,
}

_REQUIRED_TOP_LEVEL = ("envelope_id", "phase", "caller", "execution", "requested")
_TOP_LEVEL_KEYS = (
    "envelope_id",
    "phase",
    "caller",
    "execution",
    "scope",
    "governance",
    "requested",
    "granted",
    "resolution",
    "failure",
    "extensions",
)


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _check_scalar(name: str, spec: _Field, value, path: str, out: list[Violation]) -> None:
    if spec.json_type == "string":
        if not isinstance(value, str):
            out.append(
                Violation(TYPE_MISMATCH, path, f"{name} must be a string, got {type(value).__name__}")
            )
            return
        if spec.enum is not None and value not in spec.enum:
            out.append(
                Violation(
                    ENUM_VIOLATION, path, f"{name} must be one of {', '.join(spec.enum)}; got {value!r}"
                )
            )
            return
        if spec.timestamp and (
            TIMESTAMP_RE.match(value) is None or not _parses_as_timestamp(value)
        ):
            out.append(
                Violation(
                    BAD_TIMESTAMP, path, f"{name} must be an RFC 3339 UTC millisecond timestamp"
                )
            )
            return
        if spec.nonempty and not value:
            out.append(Violation(EMPTY_STRING, path, f"{name} must not be empty"))
        return
    if spec.json_type == "integer":
        if not _is_int(value):
            out.append(
                Violation(
                    TYPE_MISMATCH, path, f"{name} must be an integer, got {type(value).__name__}"
                )
            )
            return
        if spec.minimum is not None and value < spec.minimum:
            out.append(Violation(VALUE_RANGE, path, f"{name} must be >= {spec.minimum}"))
        if spec.maximum is not None and value > spec.maximum:
            out.append(Violation(VALUE_RANGE, path, f"{name} must be <= {spec.maximum}"))


def _parses_as_timestamp(value: str) -> bool:
    try:
        parse_timestamp(value)
    except ValueError:
        return False
    return True


def _check_object(
    family: str, obj, fields: dict[str, _Field], path: str, out: list[Violation]
) -> None:
    if not isinstance(obj, dict):
        out.append(
            Violation(TYPE_MISMATCH, path, f"{family} must be an object, got {type(obj).__name__}")
        )
        return
    allowed = set(fields)
    if family == "resolution":
        allowed.add("handoff_metadata")
    for key in sorted(obj):
        if key not in allowed:
            out.append(Violation(UNKNOWN_KEY, f"{path}/{key}", f"unknown key in {family}"))
    for name, spec in fields.items():
        if spec.required and name not in obj:
            out.append(Violation(MISSING_REQUIRED, f"{path}/{name}", f"{family}.{name} is required"))
    for name, value in obj.items():
        if name in fields:
            _check_scalar(name, fields[name], value, f"{path}/{name}", out)
    if family == "resolution" and "handoff_metadata" in obj:
        _check_handoff(obj["handoff_metadata"], f"{path}/handoff_metadata", out)


def _check_handoff(obj, path: str, out: list[Violation]) -> None:
    if not isinstance(obj, dict):
        out.append(Violation(TYPE_MISMATCH, path, "handoff_metadata must be an object"))
        return
    for key, value in obj.items():
        if HANDOFF_KEY_RE.match(key) is None:
            out.append(
                Violation(BAD_PATTERN, f"{path}/{key}", "handoff keys must be dotted namespaced names")
            )
        if not isinstance(value, str) or not value:
            out.append(
                Violation(TYPE_MISMATCH, f"{path}/{key}", "handoff values must be non-empty strings")
            )


def _check_extensions(value, path: str, out: list[Violation]) -> None:
    if not isinstance(value, list):
        out.append(Violation(TYPE_MISMATCH, path, "extensions must be an array"))
        return
    for index, block in enumerate(value):
        base = f"{path}/{index}"
        if not isinstance(block, dict):
            out.append(Violation(TYPE_MISMATCH, base, "extension block must be an object"))
            continue
        for key in sorted(block):
            if key not in ("namespace", "entries"):
                out.append(Violation(UNKNOWN_KEY, f"{base}/{key}", "unknown key in extension block"))
        if "namespace" not in block:
            out.append(Violation(MISSING_REQUIRED, f"{base}/namespace", "namespace is required"))
        elif not isinstance(block["namespace"], str):
            out.append(Violation(TYPE_MISMATCH, f"{base}/namespace", "namespace must be a string"))
        elif NAMESPACE_RE.match(block["namespace"]) is None:
            out.append(
                Violation(BAD_PATTERN, f"{base}/namespace", "namespace must be dotted lowercase")
            )
        if "entries" not in block:
            out.append(Violation(MISSING_REQUIRED, f"{base}/entries", "entries is required"))
            continue
        entries = block["entries"]
        if not isinstance(entries, dict):
            out.append(Violation(TYPE_MISMATCH, f"{base}/entries", "entries must be an object"))
            continue
        for key, item in entries.items():
            entry_path = f"{base}/entries/{key}"
            if not key:
                out.append(Violation(EMPTY_STRING, f"{base}/entries", "entry keys must be non-empty"))
            if isinstance(item, bool) or isinstance(item, str) or _is_int(item):
                continue
            if isinstance(item, list) and all(isinstance(elem, str) for elem in item):
                continue
            out.append(
                Violation(
                    TYPE_MISMATCH, entry_path, "entry values must be scalars or string lists"
                )
            )


def _validate_parsed(doc) -> list[Violation]:
    out: list[Violation] = []
    if not isinstance(doc, dict):
        return [Violation(TYPE_MISMATCH, "", "document root must be an object")]
    for key in sorted(doc):
        if key not in _TOP_LEVEL_KEYS:
            out.append(Violation(UNKNOWN_KEY, f"/{key}", "unknown top-level key"))
    for name in _REQUIRED_TOP_LEVEL:
        if name not in doc:
            out.append(Violation(MISSING_REQUIRED, f"/{name}", f"{name} is required"))
    if "envelope_id" in doc:
        _check_scalar(
            "envelope_id",
            _Field("string", nonempty=True),
            doc["envelope_id"],
            "/envelope_id",
            out,
        )
    if "phase" in doc:
        _check_scalar(
            "phase",
            _Field("string", enum=_enum_values(LifecyclePhase)),
            doc["phase"],
            "/phase",
            out,
        )
    for family, table in _FAMILY_TABLES.items():
        if family in doc:
            _check_object(family, doc[family], table, f"/{family}", out)
    if "extensions" in doc:
        _check_extensions(doc["extensions"], "/extensions", out)
    return out


def _parse_document(document: bytes):
    if isinstance(document, str):
        raw = document
    else:
        try:
            raw = document.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedDocument(f"not UTF-8: {exc}") from None
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"not JSON: {exc}") from None


def validate_schema(document: bytes) -> ValidationReport:
    """Structural validation only: types, enums, ranges, required core keys.

    Findings are data; malformed (non-JSON) input is reported as a
    finding too, never raised. Phase-conditional presence is out of scope
    here - that is ``check_invariants`` territory.
    """
    try:
        parsed = _parse_document(document)
    except MalformedDocument as exc:
        return ValidationReport((Violation(NOT_JSON, "", str(exc)),))
    return ValidationReport(tuple(_validate_parsed(parsed)))


# ---------------------------------------------------------------------------
# Wire <-> model


def _vector_to_wire(vector: ResourceVector) -> dict:
    return vector.dimensions()


def _scope_to_wire(scope: ScopeRefs) -> dict:
    return {
        name: getattr(scope, name)
        for name in _SCOPE_FIELDS
        if getattr(scope, name) is not None
    }


def _governance_to_wire(governance: GovernanceHints) -> dict:
    out: dict = {}
    if governance.audit_level is not None:
        level = governance.audit_level
        out["audit_level"] = level.value if isinstance(level, AuditLevel) else level
    for name in ("sensitivity_tag", "provenance", "guardrail_hint", "audit_event"):
        value = getattr(governance, name)
        if value is not None:
            out[name] = value
    return out


def _resolution_to_wire(resolution: ResolutionRecord) -> dict:
    out: dict = {"backend": resolution.backend}
    for name in ("routing_method", "actor_binding", "deployment_id", "serve_path", "public_path"):
        value = getattr(resolution, name)
        if value is not None:
            out[name] = value
    if resolution.handoff_metadata:
        out["handoff_metadata"] = dict(resolution.handoff_metadata)
    return out


def _extensions_to_wire(extensions) -> list[dict]:
    blocks = []
    for block in sorted(extensions, key=lambda b: b.namespace):
        entries = {
            key: list(value) if isinstance(value, tuple) else value
            for key, value in block.entries.items()
        }
        blocks.append({"namespace": block.namespace, "entries": entries})
    return blocks


def envelope_to_wire(envelope: ExecutionEnvelope) -> dict:
    """Wire-shaped dict for an envelope, with empty families omitted."""
    phase = envelope.phase
    doc: dict = {
        "envelope_id": envelope.envelope_id,
        "phase": phase.value if isinstance(phase, LifecyclePhase) else phase,
        "caller": {
            "requester_urn": envelope.caller.requester_urn,
            "tenant": envelope.caller.tenant,
            "request_id": envelope.caller.request_id,
            "admitted_at": format_timestamp(envelope.caller.admitted_at),
        },
        "execution": {
            "kind": envelope.execution.kind.value
            if isinstance(envelope.execution.kind, ExecutionKind)
            else envelope.execution.kind,
            "service": envelope.execution.service,
            "operation": envelope.execution.operation,
        },
        "requested": _vector_to_wire(envelope.resources_requested),
    }
    scope = _scope_to_wire(envelope.scope)
    if scope:
        doc["scope"] = scope
    governance = _governance_to_wire(envelope.governance)
    if governance:
        doc["governance"] = governance
    if envelope.resources_granted is not None:
        doc["granted"] = _vector_to_wire(envelope.resources_granted)
    if envelope.resolution is not None:
        doc["resolution"] = _resolution_to_wire(envelope.resolution)
    if envelope.failure is not None:
        stage = envelope.failure.stage
        doc["failure"] = {
            "stage": stage.value if isinstance(stage, FailureStage) else stage,
            "reason": envelope.failure.reason,
            "code": envelope.failure.code,
        }
    if envelope.extensions:
        doc["extensions"] = _extensions_to_wire(envelope.extensions)
    return doc


def encode_canonical(envelope: ExecutionEnvelope) -> bytes:
    """Encode a valid envelope to canonical bytes.

    Refuses envelopes that fail ``check_invariants``: an invalid envelope
    must never reach the wire or the event log.
    """
    report = check_invariants(envelope)
    if not report.ok:
        raise InvalidEnvelope(report)
    return canonical_bytes(envelope_to_wire(envelope))


def _envelope_from_parsed(doc: dict) -> ExecutionEnvelope:
    caller_doc = doc["caller"]
    caller = CallerIdentity(
        requester_urn=caller_doc["requester_urn"],
        tenant=caller_doc["tenant"],
        request_id=caller_doc["request_id"],
        admitted_at=parse_timestamp(caller_doc["admitted_at"]),
    )
    execution_doc = doc["execution"]
    execution = ExecutionDescriptor(
        kind=ExecutionKind(execution_doc["kind"]),
        service=execution_doc["service"],
        operation=execution_doc["operation"],
    )
    scope = ScopeRefs(**doc.get("scope", {}))
    governance_doc = dict(doc.get("governance", {}))
    if "audit_level" in governance_doc:
        governance_doc["audit_level"] = AuditLevel(governance_doc["audit_level"])
    governance = GovernanceHints(**governance_doc)
    requested = ResourceVector(**doc["requested"])
    granted = ResourceVector(**doc["granted"]) if "granted" in doc else None
    resolution = None
    if "resolution" in doc:
        resolution_doc = dict(doc["resolution"])
        if "handoff_metadata" in resolution_doc:
            resolution_doc["handoff_metadata"] = dict(resolution_doc["handoff_metadata"])
        resolution = ResolutionRecord(**resolution_doc)
    failure = None
    if "failure" in doc:
        failure_doc = doc["failure"]
        failure = FailureRecord(
            stage=FailureStage(failure_doc["stage"]),
            reason=failure_doc["reason"],
            code=failure_doc["code"],
        )
    extensions = tuple(
        ExtensionBlock(
            namespace=block["namespace"],
            entries={
                key: tuple(value) if isinstance(value, list) else value
                for key, value in block["entries"].items()
            },
        )
        for block in doc.get("extensions", [])
    )
    return ExecutionEnvelope(
        envelope_id=doc["envelope_id"],
        phase=LifecyclePhase(doc["phase"]),
        caller=caller,
        execution=execution,
        scope=scope,
        governance=governance,
        resources_requested=requested,
        resources_granted=granted,
        resolution=resolution,
        failure=failure,
        extensions=extensions,
    )


def decode(document: bytes) -> ExecutionEnvelope:
    """Decode hostile bytes into a fully validated envelope.

    Raises ``MalformedDocument`` for non-UTF-8/non-JSON input,
    ``SchemaViolation`` (with the first offending JSON-pointer path) for
    structural problems, and ``InvariantViolation`` for well-typed
    documents that break the contract.
    """
    parsed = _parse_document(document)
    findings = _validate_parsed(parsed)
    if findings:
        first = findings[0]
        raise SchemaViolation(first.path, f"{first.code} {first.message}")
    envelope = _envelope_from_parsed(parsed)
    report = check_invariants(envelope)
    if not report.ok:
        raise InvariantViolation(report)
    return envelope


def validate_document(document: bytes) -> ValidationReport:
    """Full validation as data: structural findings, then invariants."""
    structural = validate_schema(document)
    if not structural.ok:
        return structural
    envelope = _envelope_from_parsed(_parse_document(document))
    return check_invariants(envelope)


# ---------------------------------------------------------------------------
# Admission projection


ADMISSION_FAMILIES = ("caller", "execution", "scope", "governance", "requested")


def admission_projection(envelope: ExecutionEnvelope) -> dict:
    """The admission-time families in wire shape (for byte comparison)."""
    wire = envelope_to_wire(envelope)
    return {family: wire[family] for family in ADMISSION_FAMILIES if family in wire}


def admission_projection_bytes(envelope: ExecutionEnvelope) -> bytes:
    return canonical_bytes(admission_projection(envelope))


# ---------------------------------------------------------------------------
# JSON Schema generation


def _field_schema(spec: _Field) -> dict:
    if spec.json_type == "integer":
        schema: dict = {"type": "integer"}
        if spec.minimum is not None:
            schema["minimum"] = spec.minimum
        if spec.maximum is not None:
            schema["maximum"] = spec.maximum
        return schema
    schema = {"type": "string"}
    if spec.enum is not None:
        schema["enum"] = list(spec.enum)
    elif spec.timestamp:
        schema["pattern"] = TIMESTAMP_RE.pattern
    elif spec.nonempty:
        schema["minLength"] = 1
    return schema


def _object_schema(fields: dict[str, _Field], extra: dict | None = None) -> dict:
    properties = {name: _field_schema(spec) for name, spec in fields.items()}
    if extra:
        properties.update(extra)
    required = [name for name, spec in fields.items() if spec.required]
    schema: dict = {
        "type": "object",
        "additionalProperties": False,
        "properties": properties,
    }
    if required:
        schema["required"] = required
    return schema


def generate_schema() -> dict:
    """JSON Schema for the envelope document, derived from the field table."""
    handoff_schema = {
        "type": "object",
        "propertyNames": {"pattern": HANDOFF_KEY_RE.pattern},
        "additionalProperties": {"type": "string", "minLength": 1},
    }
    extensions_schema = {
        "type": "array",
        "items": {
            "type": "object",
            "additionalProperties": False,
            "required": ["namespace", "entries"],
            "properties": {
                "namespace": {"type": "string", "pattern": NAMESPACE_RE.pattern},
                "entries": {
                    "type": "object",
                    "propertyNames": {"minLength": 1},
                    "additionalProperties": {
                        "oneOf": [
                            {"type": "string"},
                            {"type": "integer"},
                            {"type": "boolean"},
                            {"type": "array", "items": {"type": "string"}},
                        ]
                    },
                },
            },
        },
    }
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$id": SCHEMA_FILENAME,
        "title": "Execution envelope",
        "description": (
            "Normalized admission record for one backend execution request: "
            "who asked, what execution and resources were requested, and what "
            "the backend granted and resolved, tagged with a lifecycle phase."
        ),
        "type": "object",
        "additionalProperties": False,
        "required": list(_REQUIRED_TOP_LEVEL),
        "properties": {
            "envelope_id": {"type": "string", "minLength": 1},
            "phase": {"type": "string", "enum": list(_enum_values(LifecyclePhase))},
            "caller": _object_schema(_CALLER_FIELDS),
            "execution": _object_schema(_EXECUTION_FIELDS),
            "scope": _object_schema(_SCOPE_FIELDS),
            "governance": _object_schema(_GOVERNANCE_FIELDS),
            "requested": _object_schema(_RESOURCE_FIELDS),
            "granted": _object_schema(_RESOURCE_FIELDS),
            "resolution": _object_schema(
                _RESOLUTION_FIELDS, extra={"handoff_metadata": handoff_schema}
            ),
            "failure": _object_schema(_FAILURE_FIELDS),
            "extensions": extensions_schema,
        },
    }


def schema_text() -> str:
    """Pretty, key-sorted rendering used for the shipped schema file."""
    return json.dumps(generate_schema(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_schema(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(schema_text(), encoding="utf-8")
    return path
