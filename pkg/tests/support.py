"""Shared fixtures-adjacent helpers: factories, corpora, and independent oracles.

The oracles here (canonicalizer, drift relation re-check, naive accounting
rescan) are deliberately written from scratch against the raw JSON
documents so they stay independent of the code paths they check.
"""

from __future__ import annotations

import json
import random
from datetime import datetime, timedelta, timezone
from pathlib import Path

from execution_envelope import (
    CallerIdentity,
    ExecutionDescriptor,
    ExecutionEnvelope,
    ExecutionKind,
    ExtensionBlock,
    FailureStage,
    GovernanceHints,
    InMemoryEventStore,
    PhaseEvent,
    ResolutionRecord,
    ResourceVector,
    ScopeRefs,
    build_admission,
)
from execution_envelope import lifecycle

REPO_ROOT = Path(__file__).resolve().parents[1]
SCHEMA_PATH = REPO_ROOT / "schema" / "execution_envelope.schema.json"
GOLDEN_DIR = REPO_ROOT / "schema" / "examples"
GOLDEN_PHASES = ("admission", "resolved", "finalized", "failed")


def read_golden(name: str) -> bytes:
    """Golden document bytes; files store one trailing newline."""
    data = (GOLDEN_DIR / f"{name}.json").read_bytes()
    assert data.endswith(b"\n")
    return data[:-1]


def independent_canonical(value) -> bytes:
    """Canonical JSON oracle, independent of the package codec."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    )


# ---------------------------------------------------------------------------
# Factories


def make_caller(**overrides) -> CallerIdentity:
    values = dict(
        requester_urn="urn:user:tenant-a:admin-1",
        tenant="tenant-a",
        request_id="req-7f3a2b",
    )
    values.update(overrides)
    return CallerIdentity(**values)


def make_execution(**overrides) -> ExecutionDescriptor:
    values = dict(kind=ExecutionKind.DEPLOYMENT, service="serving", operation="deploy_model")
    values.update(overrides)
    return ExecutionDescriptor(**values)


def make_requested(**overrides) -> ResourceVector:
    values = dict(engine="vllm", gpu_count=1, placement_preference="us-east")
    values.update(overrides)
    return ResourceVector(**values)


def admitted_envelope(**build_overrides) -> ExecutionEnvelope:
    kwargs = dict(
        scope=ScopeRefs(workspace_id="ws-alpha", deployment_group_id="dg-main"),
        governance=GovernanceHints(audit_event="deploy_requested", sensitivity_tag="internal"),
        extensions=[
            ExtensionBlock(namespace="serving", entries={"model_uri": "models://tenant-a/llm-7b"})
        ],
    )
    kwargs.update(build_overrides)
    return build_admission(make_caller(), make_execution(), make_requested(), **kwargs)


def make_granted(**overrides) -> ResourceVector:
    values = dict(engine="vllm", gpu_count=1, cpu_millicores=4000, memory_mb=16384)
    values.update(overrides)
    return ResourceVector(**values)


def resolved_envelope(envelope: ExecutionEnvelope | None = None) -> ExecutionEnvelope:
    if envelope is None:
        envelope = admitted_envelope()
    return lifecycle.resolve(
        envelope, make_granted(), ResolutionRecord(backend="ray_actor", routing_method="direct")
    )


def finalized_envelope(envelope: ExecutionEnvelope | None = None) -> ExecutionEnvelope:
    resolved = resolved_envelope(envelope)
    dep = "dep-" + resolved.envelope_id[-10:].lower()
    return lifecycle.finalize(resolved, dep, f"/serve/{dep}", "/v1/models/llm-7b")


def failed_envelope(stage: FailureStage = FailureStage.VALIDATION) -> ExecutionEnvelope:
    if stage in (FailureStage.ADMISSION, FailureStage.VALIDATION):
        return lifecycle.fail(admitted_envelope(), stage, "synthetic failure", "SYNTHETIC")
    return lifecycle.fail(resolved_envelope(), stage, "synthetic failure", "SYNTHETIC")


def store_chain(*envelopes: ExecutionEnvelope) -> InMemoryEventStore:
    store = InMemoryEventStore()
    for envelope in envelopes:
        store.append(PhaseEvent.snapshot(envelope))
    return store


# ---------------------------------------------------------------------------
# Randomized valid envelopes (fast plain-random generator for big corpora)

_ENGINES = ("vllm", "triton", "sglang", "onnxrt")
_PLACEMENTS = ("us-east", "us-west", "eu-central", "ap-south")
_TENANTS = ("tenant-a", "tenant-b", "acme", "globex")
_KINDS = tuple(ExecutionKind)
_BASE_TS = datetime(2026, 1, 1, tzinfo=timezone.utc)


def random_vector(rng: random.Random, require_nonempty: bool) -> ResourceVector:
    while True:
        values = {}
        if rng.random() < 0.7:
            values["gpu_count"] = rng.randrange(0, 9)
        if rng.random() < 0.5:
            values["cpu_millicores"] = rng.randrange(0, 64001)
        if rng.random() < 0.5:
            values["memory_mb"] = rng.randrange(0, 262145)
        if rng.random() < 0.3:
            values["concurrency"] = rng.randrange(1, 257)
        if rng.random() < 0.3:
            values["timeout_seconds"] = rng.randrange(1, 86401)
        if rng.random() < 0.2:
            values["priority"] = rng.randrange(0, 101)
        if rng.random() < 0.8:
            values["engine"] = rng.choice(_ENGINES)
        if rng.random() < 0.4:
            values["placement_preference"] = rng.choice(_PLACEMENTS)
        if values or not require_nonempty:
            return ResourceVector(**values)


def random_admitted(rng: random.Random) -> ExecutionEnvelope:
    kind = rng.choice(_KINDS)
    tenant = rng.choice(_TENANTS)
    principal = rng.choice(("user", "service"))
    caller = CallerIdentity(
        requester_urn=f"urn:{principal}:{tenant}:actor-{rng.randrange(1000)}",
        tenant=tenant,
        request_id=f"req-{rng.randrange(10**9):09d}",
        admitted_at=_BASE_TS + timedelta(milliseconds=rng.randrange(10**10)),
    )
    execution = ExecutionDescriptor(
        kind=kind, service=rng.choice(("serving", "pipelines", "tools")), operation=f"op_{rng.randrange(40)}"
    )
    scope = ScopeRefs(
        workspace_id=f"ws-{rng.randrange(50)}" if rng.random() < 0.5 else None,
        job_id=f"job-{rng.randrange(50)}" if rng.random() < 0.2 else None,
        session_id=f"sess-{rng.randrange(50)}" if rng.random() < 0.2 else None,
    )
    governance = GovernanceHints(
        audit_event=f"event_{rng.randrange(10)}" if rng.random() < 0.4 else None,
        sensitivity_tag=rng.choice(("internal", "restricted")) if rng.random() < 0.3 else None,
    )
    extensions = []
    if rng.random() < 0.5:
        entries = {f"key_{i}": rng.choice((rng.randrange(100), "värde", True, ("a", "b")))
                   for i in range(rng.randrange(1, 4))}
        extensions.append(ExtensionBlock(namespace=f"svc{rng.randrange(5)}.meta", entries=entries))
    requested = random_vector(rng, require_nonempty=kind == ExecutionKind.DEPLOYMENT)
    return build_admission(
        caller, execution, requested, scope=scope, governance=governance, extensions=extensions
    )


def random_resolved(rng: random.Random, admitted: ExecutionEnvelope | None = None) -> ExecutionEnvelope:
    if admitted is None:
        admitted = random_admitted(rng)
    granted = random_vector(rng, require_nonempty=True)
    handoff = (
        {f"sched.hint_{i}": f"v{rng.randrange(10)}" for i in range(rng.randrange(1, 3))}
        if rng.random() < 0.3
        else None
    )
    resolution = ResolutionRecord(
        backend=rng.choice(("ray_actor", "k8s_deployment", "firecracker")),
        routing_method=rng.choice(("direct", "queued", None)),
        actor_binding=f"actor-{rng.randrange(100)}" if rng.random() < 0.3 else None,
        handoff_metadata=handoff,
    )
    return lifecycle.resolve(admitted, granted, resolution)


def random_envelope(rng: random.Random) -> ExecutionEnvelope:
    """A valid envelope at a random lifecycle phase."""
    roll = rng.random()
    if roll < 0.25:
        return random_admitted(rng)
    if roll < 0.5:
        return random_resolved(rng)
    if roll < 0.75:
        resolved = random_resolved(rng)
        dep = f"dep-{rng.randrange(10**6):06d}"
        return lifecycle.finalize(resolved, dep, f"/serve/{dep}", f"/v1/models/m{rng.randrange(100)}")
    if roll < 0.875:
        stage = rng.choice((FailureStage.ADMISSION, FailureStage.VALIDATION))
        return lifecycle.fail(random_admitted(rng), stage, "synthetic reason", "SYNTH_FAIL")
    stage = rng.choice((FailureStage.RESOLUTION, FailureStage.FINALIZATION))
    return lifecycle.fail(random_resolved(rng), stage, "synthetic reason", "SYNTH_FAIL")


def random_chain(rng: random.Random) -> list[ExecutionEnvelope]:
    """A legal chain of envelopes ending at a terminal or mid phase."""
    admitted = random_admitted(rng)
    roll = rng.random()
    if roll < 0.15:
        return [admitted]
    if roll < 0.3:
        stage = rng.choice((FailureStage.ADMISSION, FailureStage.VALIDATION))
        return [admitted, lifecycle.fail(admitted, stage, "synthetic reason", "SYNTH_FAIL")]
    resolved = random_resolved(rng, admitted)
    if roll < 0.45:
        return [admitted, resolved]
    if roll < 0.65:
        stage = rng.choice((FailureStage.RESOLUTION, FailureStage.FINALIZATION))
        return [admitted, resolved, lifecycle.fail(resolved, stage, "synthetic reason", "SYNTH_FAIL")]
    dep = f"dep-{rng.randrange(10**6):06d}"
    finalized = lifecycle.finalize(resolved, dep, f"/serve/{dep}", f"/v1/models/m{rng.randrange(100)}")
    return [admitted, resolved, finalized]


# ---------------------------------------------------------------------------
# Independent oracles


def drift_relation_oracle(dimension: str, requested, granted) -> str:
    """Straight-line re-derivation of a drift relation from the raw pair."""
    numeric = dimension in (
        "gpu_count",
        "cpu_millicores",
        "memory_mb",
        "concurrency",
        "timeout_seconds",
        "priority",
    )
    if requested is None:
        return "added_by_backend"
    if granted is None:
        return "dropped_by_backend"
    if requested == granted:
        return "equal"
    if not numeric:
        return "rebound"
    return "narrowed" if granted < requested else "widened"


_ORACLE_NUMERIC = (
    "gpu_count",
    "cpu_millicores",
    "memory_mb",
    "concurrency",
    "timeout_seconds",
    "priority",
)


def naive_aggregate(events, group_by: str) -> dict:
    """Brute-force rescan of raw stored documents, bypassing the package."""
    terminal: dict[str, PhaseEvent] = {}
    for event in events:
        current = terminal.get(event.envelope_id)
        if current is None or event.sequence > current.sequence:
            terminal[event.envelope_id] = event
    groups: dict[str, dict] = {}
    for event in terminal.values():
        doc = json.loads(event.document.decode("utf-8"))
        key = doc["caller"]["tenant"] if group_by == "tenant" else doc["caller"]["requester_urn"]
        group = groups.setdefault(
            key, {"requested": {}, "granted": {}, "failures": {}, "chains": {}}
        )
        group["chains"][doc["phase"]] = group["chains"].get(doc["phase"], 0) + 1
        if "failure" in doc:
            stage = doc["failure"]["stage"]
            group["failures"][stage] = group["failures"].get(stage, 0) + 1
        for dim in _ORACLE_NUMERIC:
            if dim in doc.get("requested", {}):
                group["requested"][dim] = group["requested"].get(dim, 0) + doc["requested"][dim]
            if "granted" in doc and dim in doc["granted"]:
                group["granted"][dim] = group["granted"].get(dim, 0) + doc["granted"][dim]
    result = {}
    for key, group in groups.items():
        totals = {}
        for dim in _ORACLE_NUMERIC:
            if dim not in group["requested"] and dim not in group["granted"]:
                continue
            requested_sum = group["requested"].get(dim, 0)
            granted_sum = group["granted"].get(dim, 0)
            totals[dim] = {
                "requested_sum": requested_sum,
                "granted_sum": granted_sum,
                "drift_ratio": granted_sum / requested_sum if requested_sum > 0 else None,
            }
        result[key] = {
            "totals": totals,
            "failure_counts": group["failures"],
            "chain_counts": group["chains"],
        }
    return result


# ---------------------------------------------------------------------------
# Gateway corpus

IDENTITY = {
    "X-Requester-Urn": "urn:user:tenant-a:admin-1",
    "X-Tenant": "tenant-a",
    "X-Request-Id": "req-7f3a2b",
}


def deploy_body(**overrides) -> dict:
    body = {
        "model_uri": "models://tenant-a/llm-7b",
        "engine": "vllm",
        "gpu_count": 1,
        "placement_preference": "us-east",
        "audit_event": "deploy_requested",
    }
    body.update(overrides)
    return {k: v for k, v in body.items() if v is not None}


def deploy_corpus(rng: random.Random, count: int) -> list[dict]:
    """Mixed valid/invalid deploy requests; each entry has headers + raw body."""
    corpus = []
    for index in range(count):
        roll = rng.random()
        headers = {
            "X-Requester-Urn": f"urn:user:{rng.choice(_TENANTS)}:op-{rng.randrange(40)}",
            "X-Tenant": rng.choice(_TENANTS),
            "X-Request-Id": f"req-{index:06d}",
        }
        if roll < 0.55:
            body = deploy_body(
                model_uri=f"models://{headers['X-Tenant']}/model-{rng.randrange(30)}",
                engine=rng.choice(("vllm", "triton")),
                gpu_count=rng.choice((None, 0, 1, 2, 6, 12)),
                cpu_millicores=rng.choice((None, 2000, 8000)),
                memory_mb=rng.choice((None, 8192, 65536)),
                placement_preference=rng.choice((None, "us-east", "us-west")),
                timeout_seconds=rng.choice((None, 600)),
                concurrency=rng.choice((None, 4)),
                workspace_id=rng.choice((None, "ws-alpha")),
                deployment_group_id=rng.choice((None, "dg-main")),
                sensitivity_tag=rng.choice((None, "internal")),
            )
            raw = json.dumps(body).encode("utf-8")
        elif roll < 0.65:
            raw = json.dumps(deploy_body(engine="tgi-z")).encode("utf-8")
        elif roll < 0.72:
            raw = json.dumps(deploy_body(placement_preference="eu-restricted")).encode("utf-8")
        elif roll < 0.8:
            raw = json.dumps(deploy_body(model_uri=None)).encode("utf-8")
        elif roll < 0.86:
            raw = json.dumps(deploy_body(engine=None, gpu_count=2)).encode("utf-8")
        elif roll < 0.9:
            raw = json.dumps(deploy_body(gpu_count="two")).encode("utf-8")
        elif roll < 0.94:
            raw = b'{"model_uri": "models://x/y", "engine"'  # malformed on purpose
        elif roll < 0.97:
            raw = json.dumps(deploy_body()).encode("utf-8")
            headers = {}  # missing identity
        else:
            raw = json.dumps({}).encode("utf-8")
        corpus.append({"headers": headers, "body": raw})
    return corpus
