"""HTTP gateway for ``POST /serving/deploy_model``.

One deploy request is threaded through admission -> resolution ->
finalization (or failure) against a deterministic mock serving backend,
with every phase persisted to the event store. The envelope is built
before any backend-specific resolution starts, and the serving path
computes its behavior without consulting it: with
``envelope_pipeline_enabled`` false the same requests produce
byte-identical response bodies, which is how the additivity claim is
tested.

Identity arrives pre-normalized in the ``X-Requester-Urn``, ``X-Tenant``
and ``X-Request-Id`` headers; requests without them are rejected with 401
and no envelope, since an envelope without a caller would be invented
identity.
"""

from __future__ import annotations

import json
import logging
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from starlette.applications import Starlette
from starlette.requests import Request
from starlette.responses import Response
from starlette.routing import Route

from . import consumers, lifecycle
from .codec import canonical_bytes
from .errors import (
    EngineUnknown,
    EnvelopeError,
    GpuCapExceeded,
    PlacementDenied,
    ResolverError,
)
from .ids import IdSource
from .model import (
    CallerIdentity,
    ExecutionDescriptor,
    ExecutionEnvelope,
    ExecutionKind,
    ExtensionBlock,
    FailureStage,
    GovernanceHints,
    LifecyclePhase,
    ResolutionRecord,
    ResourceVector,
    ScopeRefs,
    build_admission,
)
from .store import EventStore, FileEventStore, PhaseEvent

logger = logging.getLogger(__name__)

ENV_PREFIX = "ENVELOPE_"

IDENTITY_HEADERS = ("x-requester-urn", "x-tenant", "x-request-id")

# Extension namespace for serving-specific request fields that have no
# core family (currently just the model reference).
SERVING_NAMESPACE = "serving"


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class EngineSpec:
    """Mock catalog entry for one engine family."""

    max_gpu: int
    default_cpu_millicores: int
    default_memory_mb: int
    backend: str


@dataclass(frozen=True)
class ResolverConfig:
    """Deterministic mock resolver settings.

    ``finalize_failure_rate`` is a seeded test hook for exercising
    finalization failures; keep it 0 outside tests.
    """

    engines: Mapping[str, EngineSpec]
    deny_placements: tuple[str, ...] = ()
    finalize_failure_rate: float = 0.0

    def validate(self) -> None:
        if not self.engines:
            raise ValueError("resolver config needs at least one engine")
        for name, spec in self.engines.items():
            if spec.max_gpu < 0:
                raise ValueError(f"engine {name!r}: max_gpu must be >= 0")
            if not spec.backend:
                raise ValueError(f"engine {name!r}: backend must be non-empty")
        if not 0.0 <= self.finalize_failure_rate <= 1.0:
            raise ValueError("finalize_failure_rate must be in [0, 1]")


def default_engines() -> dict[str, EngineSpec]:
    return {
        "vllm": EngineSpec(
            max_gpu=4, default_cpu_millicores=4000, default_memory_mb=16384, backend="ray_actor"
        ),
        "triton": EngineSpec(
            max_gpu=8,
            default_cpu_millicores=8000,
            default_memory_mb=32768,
            backend="k8s_deployment",
        ),
    }


@dataclass(frozen=True)
class GatewayConfig:
    listen_addr: str = "127.0.0.1:8080"
    event_log_path: str = "envelope_events.jsonl"
    envelope_pipeline_enabled: bool = True
    narrow_over_cap: bool = True
    resolver: ResolverConfig = field(
        default_factory=lambda: ResolverConfig(engines=default_engines())
    )
    # Seeds envelope-id allocation and the finalize-failure draws; test
    # hook for byte-level response comparisons, never for real traffic.
    deterministic_seed: int | None = None


_CONFIG_KEYS = {
    "listen_addr",
    "event_log_path",
    "envelope_pipeline_enabled",
    "narrow_over_cap",
    "engines",
    "deny_placements",
    "finalize_failure_rate",
    "deterministic_seed",
}

_ENGINE_KEYS = {"max_gpu", "default_cpu_millicores", "default_memory_mb", "backend"}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def load_config(path: str | Path, environ: Mapping[str, str] | None = None) -> GatewayConfig:
    """Load gateway config from a JSON file plus ``ENVELOPE_*`` overrides.

    Environment variables override file values for the scalar keys:
    ENVELOPE_LISTEN_ADDR, ENVELOPE_EVENT_LOG_PATH,
    ENVELOPE_PIPELINE_ENABLED, ENVELOPE_NARROW_OVER_CAP,
    ENVELOPE_FINALIZE_FAILURE_RATE, ENVELOPE_DETERMINISTIC_SEED.
    """
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValueError("config root must be a JSON object")
    unknown = sorted(set(raw) - _CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")

    env = os.environ if environ is None else environ

    def override(env_suffix: str, parse, current):
        value = env.get(ENV_PREFIX + env_suffix)
        return parse(value) if value is not None else current

    engines_raw = raw.get("engines")
    if engines_raw is None:
        engines = default_engines()
    else:
        engines = {}
        for name, entry in engines_raw.items():
            unknown_engine = sorted(set(entry) - _ENGINE_KEYS)
            if unknown_engine:
                raise ValueError(
                    f"engine {name!r}: unknown keys: {', '.join(unknown_engine)}"
                )
            engines[name] = EngineSpec(
                max_gpu=entry["max_gpu"],
                default_cpu_millicores=entry["default_cpu_millicores"],
                default_memory_mb=entry["default_memory_mb"],
                backend=entry["backend"],
            )

    resolver = ResolverConfig(
        engines=engines,
        deny_placements=tuple(raw.get("deny_placements", ())),
        finalize_failure_rate=override(
            "FINALIZE_FAILURE_RATE", float, raw.get("finalize_failure_rate", 0.0)
        ),
    )
    resolver.validate()

    seed = raw.get("deterministic_seed")
    seed_text = env.get(ENV_PREFIX + "DETERMINISTIC_SEED")
    if seed_text is not None:
        seed = int(seed_text)

    return GatewayConfig(
        listen_addr=override("LISTEN_ADDR", str, raw.get("listen_addr", "127.0.0.1:8080")),
        event_log_path=override(
            "EVENT_LOG_PATH", str, raw.get("event_log_path", "envelope_events.jsonl")
        ),
        envelope_pipeline_enabled=override(
            "PIPELINE_ENABLED",
            _parse_bool,
            bool(raw.get("envelope_pipeline_enabled", True)),
        ),
        narrow_over_cap=override(
            "NARROW_OVER_CAP", _parse_bool, bool(raw.get("narrow_over_cap", True))
        ),
        resolver=resolver,
        deterministic_seed=seed,
    )


# ---------------------------------------------------------------------------
# Deploy request parsing


@dataclass(frozen=True, slots=True)
class DeployModelRequest:
    model_uri: str | None = None
    engine: str | None = None
    gpu_count: int | None = None
    cpu_millicores: int | None = None
    memory_mb: int | None = None
    placement_preference: str | None = None
    timeout_seconds: int | None = None
    concurrency: int | None = None
    workspace_id: str | None = None
    deployment_group_id: str | None = None
    audit_event: str | None = None
    sensitivity_tag: str | None = None


_STRING_FIELDS = (
    "model_uri",
    "engine",
    "placement_preference",
    "workspace_id",
    "deployment_group_id",
    "audit_event",
    "sensitivity_tag",
)
_INT_FIELDS = ("gpu_count", "cpu_millicores", "memory_mb", "timeout_seconds", "concurrency")


def parse_deploy_request(body: dict) -> tuple[DeployModelRequest, list[tuple[str, str]]]:
    """Extract typed fields and a list of (code, message) problems.

    Unknown body keys are ignored: the public payload predates the
    envelope and stays untouched. Wrong-typed fields are reported and
    dropped (they cannot be represented in the recorded ask); missing
    model_uri/engine are admission-level errors.
    """
    problems: list[tuple[str, str]] = []
    values: dict = {}

    if not body.get("model_uri") or not isinstance(body.get("model_uri"), str):
        if "model_uri" in body and not isinstance(body["model_uri"], str):
            problems.append(("INVALID_FIELD", "model_uri must be a string"))
        else:
            problems.append(("MISSING_MODEL_URI", "model_uri is required"))
    if not body.get("engine") or not isinstance(body.get("engine"), str):
        if "engine" in body and not isinstance(body["engine"], str):
            problems.append(("INVALID_FIELD", "engine must be a string"))
        else:
            problems.append(("MISSING_ENGINE", "engine is required"))

    for name in _STRING_FIELDS:
        if name not in body or body[name] is None:
            continue
        value = body[name]
        if not isinstance(value, str) or not value:
            if name not in ("model_uri", "engine"):
                problems.append(("INVALID_FIELD", f"{name} must be a non-empty string"))
            continue
        values[name] = value

    minimums = {"gpu_count": 0, "cpu_millicores": 0, "memory_mb": 0, "timeout_seconds": 1, "concurrency": 1}
    for name in _INT_FIELDS:
        if name not in body or body[name] is None:
            continue
        value = body[name]
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(("INVALID_FIELD", f"{name} must be an integer"))
            continue
        if value < minimums[name]:
            problems.append(("RESOURCE_RANGE", f"{name} must be >= {minimums[name]}"))
        values[name] = value

    return DeployModelRequest(**values), problems


# ---------------------------------------------------------------------------
# Mock resolver


def resolve_mock(
    requested: ResourceVector,
    config: ResolverConfig,
    narrow_over_cap: bool = True,
) -> tuple[ResourceVector, ResolutionRecord]:
    """Deterministic stand-in for service-specific validation and narrowing.

    Grants exactly the dimensions it validates: the requested engine, the
    GPU ask capped at the engine maximum (or rejected when narrowing is
    disabled), and the cpu/memory ask with engine defaults filled in.
    """
    engine = requested.engine
    if engine is None or engine not in config.engines:
        raise EngineUnknown(f"unknown engine {engine!r}")
    spec = config.engines[engine]
    placement = requested.placement_preference
    if placement is not None and placement in config.deny_placements:
        raise PlacementDenied(f"placement {placement!r} is denied")
    gpu = requested.gpu_count
    if gpu is not None and gpu > spec.max_gpu and not narrow_over_cap:
        raise GpuCapExceeded(
            f"gpu_count {gpu} exceeds hard cap {spec.max_gpu} for engine {engine!r}"
        )
    granted = ResourceVector(
        engine=engine,
        gpu_count=min(gpu, spec.max_gpu) if gpu is not None else None,
        cpu_millicores=(
            requested.cpu_millicores
            if requested.cpu_millicores is not None
            else spec.default_cpu_millicores
        ),
        memory_mb=(
            requested.memory_mb if requested.memory_mb is not None else spec.default_memory_mb
        ),
    )
    resolution = ResolutionRecord(backend=spec.backend, routing_method="direct")
    return granted, resolution


# ---------------------------------------------------------------------------
# HTTP plumbing


def _json_response(status: int, payload: dict, envelope_id: str | None = None) -> Response:
    headers = {}
    if envelope_id is not None:
        headers["X-Envelope-Id"] = envelope_id
    return Response(
        content=canonical_bytes(payload),
        status_code=status,
        media_type="application/json",
        headers=headers,
    )


def _error(
    status: int, code: str, message: str, envelope_id: str | None = None
) -> Response:
    # Error bodies never carry ids: pipeline-on and pipeline-off responses
    # must be byte-identical, and only pipeline-on has envelopes.
    return _json_response(
        status, {"code": code, "message": message, "status": "error"}, envelope_id
    )


def _public_path(model_uri: str) -> str:
    segment = model_uri.rstrip("/").rsplit("/", 1)[-1]
    return f"/v1/models/{segment or model_uri}"


class _DeployOutcome:
    """Mutable per-request record of what the pipeline appended."""

    __slots__ = ("envelope", "recorded")

    def __init__(self) -> None:
        self.envelope: ExecutionEnvelope | None = None
        self.recorded = False

    @property
    def envelope_id(self) -> str | None:
        return self.envelope.envelope_id if self.recorded and self.envelope else None


def _build_envelope(
    envelope_id: str,
    caller: CallerIdentity,
    request: DeployModelRequest,
    requested: ResourceVector,
) -> ExecutionEnvelope | None:
    """Construct the admission envelope; None when no valid one can exist."""
    extensions = []
    if request.model_uri:
        extensions.append(
            ExtensionBlock(namespace=SERVING_NAMESPACE, entries={"model_uri": request.model_uri})
        )
    try:
        return build_admission(
            caller,
            ExecutionDescriptor(
                kind=ExecutionKind.DEPLOYMENT, service="serving", operation="deploy_model"
            ),
            requested,
            scope=ScopeRefs(
                workspace_id=request.workspace_id,
                deployment_group_id=request.deployment_group_id,
            ),
            governance=GovernanceHints(
                audit_event=request.audit_event, sensitivity_tag=request.sensitivity_tag
            ),
            extensions=extensions,
            envelope_id=envelope_id,
        )
    except EnvelopeError as exc:
        logger.info("request %s: no valid admission envelope (%s)", envelope_id, exc)
        return None


async def handle_deploy_model(request: Request) -> Response:
    state = request.app.state
    config: GatewayConfig = state.config
    store: EventStore = state.store
    pipeline = config.envelope_pipeline_enabled

    urn = request.headers.get("x-requester-urn")
    tenant = request.headers.get("x-tenant")
    request_id = request.headers.get("x-request-id")
    if not urn or not tenant or not request_id:
        return _error(
            401,
            "MISSING_IDENTITY",
            "identity headers X-Requester-Urn, X-Tenant and X-Request-Id are required",
        )

    # The correlation id is allocated in both modes: it seeds the
    # deployment identity, so responses stay comparable with the
    # pipeline disabled.
    envelope_id = state.ids.next()
    outcome = _DeployOutcome()

    raw = await request.body()
    try:
        body = json.loads(raw.decode("utf-8")) if raw else None
    except (UnicodeDecodeError, json.JSONDecodeError):
        body = None
    if not isinstance(body, dict):
        return _error(400, "MALFORMED_BODY", "request body must be a JSON object")

    deploy, problems = parse_deploy_request(body)
    requested = ResourceVector(
        gpu_count=deploy.gpu_count,
        cpu_millicores=deploy.cpu_millicores,
        memory_mb=deploy.memory_mb,
        concurrency=deploy.concurrency,
        timeout_seconds=deploy.timeout_seconds,
        engine=deploy.engine,
        placement_preference=deploy.placement_preference,
    )

    caller = CallerIdentity(requester_urn=urn, tenant=tenant, request_id=request_id)
    if pipeline:
        outcome.envelope = _build_envelope(envelope_id, caller, deploy, requested)
        if outcome.envelope is not None:
            response = _record(store, outcome, outcome.envelope)
            if response is not None:
                return response

    if problems:
        code, message = problems[0]
        response = _record_failure(store, outcome, FailureStage.ADMISSION, message, code)
        if response is not None:
            return response
        return _error(400, code, message, outcome.envelope_id)

    try:
        granted, resolution = resolve_mock(
            requested, config.resolver, narrow_over_cap=config.narrow_over_cap
        )
    except ResolverError as exc:
        response = _record_failure(store, outcome, FailureStage.VALIDATION, str(exc), exc.code)
        if response is not None:
            return response
        return _error(422, exc.code, str(exc), outcome.envelope_id)

    if outcome.envelope is not None:
        envelope = lifecycle.resolve(outcome.envelope, granted, resolution)
        response = _record(store, outcome, envelope)
        if response is not None:
            return response

    rate = config.resolver.finalize_failure_rate
    if rate > 0 and state.failure_rng.random() < rate:
        message = "runtime bind timeout"
        response = _record_failure(store, outcome, FailureStage.FINALIZATION, message, "BIND_TIMEOUT")
        if response is not None:
            return response
        return _error(500, "BIND_TIMEOUT", message, outcome.envelope_id)

    deployment_id = "dep-" + envelope_id[-10:].lower()
    serve_path = f"/serve/{deployment_id}"
    public_path = _public_path(deploy.model_uri)

    if outcome.envelope is not None:
        envelope = lifecycle.finalize(outcome.envelope, deployment_id, serve_path, public_path)
        response = _record(store, outcome, envelope)
        if response is not None:
            return response

    return _json_response(
        200,
        {
            "envelope_id": envelope_id,
            "deployment_id": deployment_id,
            "serve_path": serve_path,
            "public_path": public_path,
            "status": "deployed",
        },
        outcome.envelope_id,
    )


def _record(
    store: EventStore, outcome: _DeployOutcome, envelope: ExecutionEnvelope
) -> Response | None:
    """Append a snapshot; on store trouble answer 500 immediately."""
    try:
        store.append(PhaseEvent.snapshot(envelope))
    except OSError as exc:
        logger.error("event store unavailable: %s", exc)
        return _error(500, "STORE_UNAVAILABLE", "event store unavailable", outcome.envelope_id)
    outcome.envelope = envelope
    outcome.recorded = True
    return None


def _record_failure(
    store: EventStore,
    outcome: _DeployOutcome,
    stage: FailureStage,
    reason: str,
    code: str,
) -> Response | None:
    if outcome.envelope is None:
        return None
    failed = lifecycle.fail(outcome.envelope, stage, reason, code)
    return _record(store, outcome, failed)


async def handle_get_envelope(request: Request) -> Response:
    store: EventStore = request.app.state.store
    envelope_id = request.path_params["envelope_id"]
    event = store.latest(envelope_id)
    if event is None:
        return _error(404, "NOT_FOUND", f"no envelope {envelope_id!r}")
    return Response(content=event.document, media_type="application/json")


async def handle_get_envelope_events(request: Request) -> Response:
    store: EventStore = request.app.state.store
    envelope_id = request.path_params["envelope_id"]
    chain = store.load(envelope_id)
    if not chain:
        return _error(404, "NOT_FOUND", f"no envelope {envelope_id!r}")
    return _json_response(
        200, {"envelope_id": envelope_id, "events": [event.to_wire() for event in chain]}
    )


async def handle_list_envelopes(request: Request) -> Response:
    store: EventStore = request.app.state.store
    params = request.query_params
    phase = params.get("phase")
    kind = params.get("kind")
    if phase is not None:
        try:
            phase = LifecyclePhase(phase)
        except ValueError:
            return _error(400, "INVALID_FILTER", f"unknown phase {phase!r}")
    if kind is not None and kind not in {member.value for member in ExecutionKind}:
        return _error(400, "INVALID_FILTER", f"unknown execution kind {kind!r}")
    ids = store.query(phase=phase, tenant=params.get("tenant"), execution_kind=kind)
    return _json_response(200, {"envelope_ids": ids})


async def handle_accounting_drift(request: Request) -> Response:
    store: EventStore = request.app.state.store
    group_by = request.query_params.get("group_by", "tenant")
    try:
        summaries = consumers.aggregate(store.events(), group_by=group_by)
    except ValueError as exc:
        return _error(400, "INVALID_FILTER", str(exc))
    return _json_response(
        200, {"group_by": group_by, "summaries": [summary.to_wire() for summary in summaries]}
    )


async def handle_healthz(request: Request) -> Response:
    return _json_response(200, {"status": "ok"})


def create_app(config: GatewayConfig, store: EventStore | None = None) -> Starlette:
    """Build the ASGI app; a store can be injected for tests."""
    config.resolver.validate()
    if store is None:
        store = FileEventStore(config.event_log_path)
    app = Starlette(
        routes=[
            Route("/serving/deploy_model", handle_deploy_model, methods=["POST"]),
            Route("/admin/envelopes/{envelope_id}", handle_get_envelope, methods=["GET"]),
            Route(
                "/admin/envelopes/{envelope_id}/events",
                handle_get_envelope_events,
                methods=["GET"],
            ),
            Route("/admin/envelopes", handle_list_envelopes, methods=["GET"]),
            Route("/admin/accounting/drift", handle_accounting_drift, methods=["GET"]),
            Route("/healthz", handle_healthz, methods=["GET"]),
        ]
    )
    app.state.config = config
    app.state.store = store
    app.state.ids = IdSource(config.deterministic_seed)
    app.state.failure_rng = random.Random(
        None if config.deterministic_seed is None else config.deterministic_seed + 1
    )
    return app


def run(config: GatewayConfig) -> None:
    """Run the gateway under uvicorn until interrupted."""
    import uvicorn

    host, _, port = config.listen_addr.rpartition(":")
    uvicorn.run(create_app(config), host=host or "127.0.0.1", port=int(port))
