"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. Every tolerance and corpus size is pinned here, not configurable.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import random
import time
from dataclasses import replace

import pytest
from starlette.testclient import TestClient

import support
from execution_envelope import (
    FailureRecord,
    FailureStage,
    FileEventStore,
    GatewayConfig,
    InMemoryEventStore,
    ImmutabilityBreach,
    LifecyclePhase,
    PhaseEvent,
    ResolutionRecord,
    ResolverConfig,
    aggregate,
    check_invariants,
    create_app,
    decode,
    encode_canonical,
    is_legal_transition,
)
from execution_envelope import lifecycle
from execution_envelope.gateway import DeployModelRequest, default_engines
from execution_envelope.ids import utc_now_ms


def _passed(number: int, name: str) -> None:
    print(f"ACCEPTANCE {number} PASS: {name}")


def _make_client(pipeline: bool, seed: int, failure_rate: float = 0.0):
    config = GatewayConfig(
        envelope_pipeline_enabled=pipeline,
        resolver=ResolverConfig(
            engines=default_engines(),
            deny_placements=("eu-restricted",),
            finalize_failure_rate=failure_rate,
        ),
        deterministic_seed=seed,
    )
    store = InMemoryEventStore()
    return TestClient(create_app(config, store=store), raise_server_exceptions=True), store


def test_criterion_1_construction_from_context():
    """Every DeployModelRequest field plus identity header maps to one
    admission-snapshot location; nothing is unmapped."""
    started = time.monotonic()

    # field -> (family, *path into the admission document)
    field_map = {
        "model_uri": ("extensions", "serving", "model_uri"),
        "engine": ("requested", "engine"),
        "gpu_count": ("requested", "gpu_count"),
        "cpu_millicores": ("requested", "cpu_millicores"),
        "memory_mb": ("requested", "memory_mb"),
        "placement_preference": ("requested", "placement_preference"),
        "timeout_seconds": ("requested", "timeout_seconds"),
        "concurrency": ("requested", "concurrency"),
        "workspace_id": ("scope", "workspace_id"),
        "deployment_group_id": ("scope", "deployment_group_id"),
        "audit_event": ("governance", "audit_event"),
        "sensitivity_tag": ("governance", "sensitivity_tag"),
    }
    header_map = {
        "X-Requester-Urn": ("caller", "requester_urn"),
        "X-Tenant": ("caller", "tenant"),
        "X-Request-Id": ("caller", "request_id"),
    }
    request_fields = {f.name for f in dataclasses.fields(DeployModelRequest)}
    assert set(field_map) == request_fields, "mapping must cover every request field"
    assert set(header_map) == set(support.IDENTITY), "mapping must cover every identity header"

    body = {
        "model_uri": "models://tenant-a/llm-7b",
        "engine": "vllm",
        "gpu_count": 1,
        "cpu_millicores": 2000,
        "memory_mb": 8192,
        "placement_preference": "us-east",
        "timeout_seconds": 600,
        "concurrency": 4,
        "workspace_id": "ws-alpha",
        "deployment_group_id": "dg-main",
        "audit_event": "deploy_requested",
        "sensitivity_tag": "internal",
    }
    assert set(body) == request_fields

    client, store = _make_client(pipeline=True, seed=7)
    response = client.post("/serving/deploy_model", json=body, headers=support.IDENTITY)
    assert response.status_code == 200
    admission = json.loads(store.load(response.json()["envelope_id"])[0].document)

    def lookup(location):
        if location[0] == "extensions":
            _, namespace, key = location
            block = next(b for b in admission["extensions"] if b["namespace"] == namespace)
            return block["entries"][key]
        family, key = location
        return admission[family][key]

    for field_name, location in field_map.items():
        assert lookup(location) == body[field_name], f"{field_name} not traceable"
    for header_name, location in header_map.items():
        assert lookup(location) == support.IDENTITY[header_name], f"{header_name} not traceable"

    elapsed = time.monotonic() - started
    assert elapsed < 1.0, f"criterion 1 must run in < 1 s, took {elapsed:.2f}s"
    _passed(1, "construction from context (all fields mapped, "
              f"{elapsed * 1000:.0f} ms)")


def test_criterion_2_requested_preservation():
    """1,000 randomized deploy requests; the canonical requested block is
    identical across every snapshot of every produced chain."""
    started = time.monotonic()
    rng = random.Random(20_260_808)
    corpus = support.deploy_corpus(rng, 1000)
    client, store = _make_client(pipeline=True, seed=11, failure_rate=0.1)
    for entry in corpus:
        headers = {**entry["headers"], "Content-Type": "application/json"}
        client.post("/serving/deploy_model", content=entry["body"], headers=headers)

    chains = store.envelope_ids()
    assert len(chains) > 400, "corpus should produce a substantial chain count"
    violations = 0
    for envelope_id in chains:
        blocks = {
            support.independent_canonical(json.loads(event.document)["requested"])
            for event in store.load(envelope_id)
        }
        if len(blocks) != 1:
            violations += 1
    elapsed = time.monotonic() - started
    assert violations == 0
    assert elapsed < 30.0, f"criterion 2 must run in < 30 s, took {elapsed:.1f}s"
    _passed(2, f"requested preservation over {len(chains)} chains "
              f"({elapsed:.1f} s, zero violations)")


def test_criterion_3_behavior_preservation():
    """200-request corpus replayed with the pipeline on vs off: identical
    status codes and bodies (ids seeded; X-Envelope-Id header excluded)."""
    rng = random.Random(3_141_592)
    corpus = support.deploy_corpus(rng, 200)
    client_on, store_on = _make_client(pipeline=True, seed=42, failure_rate=0.15)
    client_off, store_off = _make_client(pipeline=False, seed=42, failure_rate=0.15)

    diffs = 0
    for entry in corpus:
        headers = {**entry["headers"], "Content-Type": "application/json"}
        on = client_on.post("/serving/deploy_model", content=entry["body"], headers=headers)
        off = client_off.post("/serving/deploy_model", content=entry["body"], headers=headers)
        if on.status_code != off.status_code or on.content != off.content:
            diffs += 1
    assert diffs == 0
    assert store_off.envelope_ids() == [], "disabled pipeline must write nothing"
    assert len(store_on.envelope_ids()) > 50, "enabled pipeline must record chains"
    _passed(3, "behavior preservation over 200 requests (zero diffs)")


def test_criterion_4_contract_invariant_suite():
    """Transition legality is exactly 4/16; every single-field presence
    perturbation is caught; every admission-family rewrite is rejected at
    the store boundary."""
    legal = [
        pair
        for pair in itertools.product(LifecyclePhase, repeat=2)
        if is_legal_transition(*pair)
    ]
    assert len(legal) == 4
    assert set(legal) == {
        (LifecyclePhase.ADMISSION, LifecyclePhase.RESOLVED),
        (LifecyclePhase.RESOLVED, LifecyclePhase.FINALIZED),
        (LifecyclePhase.ADMISSION, LifecyclePhase.FAILED),
        (LifecyclePhase.RESOLVED, LifecyclePhase.FAILED),
    }

    baselines = {
        "admission": support.admitted_envelope(),
        "resolved": support.resolved_envelope(),
        "finalized": support.finalized_envelope(),
        "failed_validation": support.failed_envelope(FailureStage.VALIDATION),
        "failed_finalization": support.failed_envelope(FailureStage.FINALIZATION),
    }
    checked = 0
    for label, baseline in baselines.items():
        assert check_invariants(baseline).ok
        perturbations = [
            replace(
                baseline,
                resources_granted=None
                if baseline.resources_granted is not None
                else support.make_granted(),
            ),
            replace(
                baseline,
                resolution=None
                if baseline.resolution is not None
                else ResolutionRecord(backend="ray_actor"),
            ),
            replace(
                baseline,
                failure=None
                if baseline.failure is not None
                else FailureRecord(stage=FailureStage.VALIDATION, reason="synthetic", code="SYNTH"),
            ),
        ]
        for mutant in perturbations:
            assert not check_invariants(mutant).ok, f"{label}: perturbation missed"
            checked += 1
    assert checked == 15

    admitted = support.admitted_envelope()
    resolved = support.resolved_envelope(admitted)
    rewrites = [
        ("caller", "tenant", "tenant-b"),
        ("execution", "operation", "deploy_other"),
        ("scope", "workspace_id", "ws-rewritten"),
        ("governance", "audit_event", "rewritten"),
        ("requested", "gpu_count", 99),
    ]
    for family, key, value in rewrites:
        store = InMemoryEventStore()
        store.append(PhaseEvent.snapshot(admitted))
        doc = json.loads(encode_canonical(resolved))
        doc[family][key] = value
        event = PhaseEvent(
            envelope_id=resolved.envelope_id,
            sequence=0,
            phase=LifecyclePhase.RESOLVED,
            recorded_at=utc_now_ms(),
            document=support.independent_canonical(doc),
        )
        with pytest.raises(ImmutabilityBreach):
            store.append(event)
    _passed(4, "contract invariants (4/16 transitions, 15 perturbations caught, "
              "5 rewrite families rejected)")


def test_criterion_5_failure_honesty():
    """Failure corpus across all four stages: early failures never carry a
    grant; late failures preserve the resolved grant byte-for-byte."""
    rng = random.Random(65_537)

    early_chains = []
    late_chains = []
    for _ in range(100):
        admitted = support.random_admitted(rng)
        stage = rng.choice((FailureStage.ADMISSION, FailureStage.VALIDATION))
        early_chains.append([admitted, lifecycle.fail(admitted, stage, "synthetic", "SYNTH")])
        admitted2 = support.random_admitted(rng)
        resolved = support.random_resolved(rng, admitted2)
        stage = rng.choice((FailureStage.RESOLUTION, FailureStage.FINALIZATION))
        late_chains.append(
            [admitted2, resolved, lifecycle.fail(resolved, stage, "synthetic", "SYNTH")]
        )

    # Gateway-produced failures join the corpus (stages admission,
    # validation, finalization).
    client, store = _make_client(pipeline=True, seed=13, failure_rate=1.0)
    client.post(
        "/serving/deploy_model",
        json=support.deploy_body(model_uri=None),
        headers=support.IDENTITY,
    )
    client.post(
        "/serving/deploy_model",
        json=support.deploy_body(engine="tgi-z"),
        headers=support.IDENTITY,
    )
    client.post("/serving/deploy_model", json=support.deploy_body(), headers=support.IDENTITY)

    stages_seen = set()

    def audit(documents):
        failed_doc = json.loads(documents[-1])
        stage = failed_doc["failure"]["stage"]
        stages_seen.add(stage)
        if stage in ("admission", "validation"):
            assert "granted" not in failed_doc, f"early failure carries a grant: {stage}"
        else:
            resolved_doc = json.loads(documents[-2])
            assert resolved_doc["phase"] == "resolved"
            assert support.independent_canonical(
                failed_doc["granted"]
            ) == support.independent_canonical(resolved_doc["granted"])

    for chain in early_chains + late_chains:
        audit([encode_canonical(env) for env in chain])
    for envelope_id in store.envelope_ids():
        documents = [event.document for event in store.load(envelope_id)]
        if json.loads(documents[-1])["phase"] == "failed":
            audit(documents)

    assert stages_seen == {"admission", "validation", "resolution", "finalization"}
    _passed(5, "failure honesty across all four stages "
              f"({len(early_chains) + len(late_chains)} generated chains plus gateway chains)")


def test_criterion_6_codec_round_trip():
    """decode(encode(e)) == e over 10,000 randomized envelopes; encode is
    double-encode stable; goldens round-trip bit-exactly."""
    rng = random.Random(104_729)
    for index in range(10_000):
        envelope = support.random_envelope(rng)
        first = encode_canonical(envelope)
        assert decode(first) == envelope, f"round-trip failed at case {index}"
        assert encode_canonical(decode(first)) == first, f"determinism failed at case {index}"

    for name in support.GOLDEN_PHASES:
        raw = support.read_golden(name)
        assert encode_canonical(decode(raw)) == raw, f"golden {name} not bit-exact"
    _passed(6, "codec round-trip over 10,000 randomized envelopes and 4 goldens")


def test_criterion_7_accounting_oracle_equivalence():
    """aggregate over a 1,000-chain corpus equals a naive rescan: exact
    integer sums, drift ratios within rel 1e-12."""
    rng = random.Random(999_983)
    store = InMemoryEventStore()
    chains = 0
    while chains < 1000:
        for env in support.random_chain(rng):
            store.append(PhaseEvent.snapshot(env))
        chains += 1

    for group_by in ("tenant", "requester_urn"):
        summaries = {s.group_key: s for s in aggregate(store.events(), group_by=group_by)}
        oracle = support.naive_aggregate(store.events(), group_by)
        assert set(summaries) == set(oracle)
        for key, expected in oracle.items():
            summary = summaries[key]
            assert dict(summary.failure_counts) == expected["failure_counts"]
            assert dict(summary.chain_counts) == expected["chain_counts"]
            assert set(summary.totals) == set(expected["totals"])
            for dimension, totals in expected["totals"].items():
                got = summary.totals[dimension]
                assert got.requested_sum == totals["requested_sum"]
                assert got.granted_sum == totals["granted_sum"]
                if totals["drift_ratio"] is None:
                    assert got.drift_ratio is None
                else:
                    assert got.drift_ratio == pytest.approx(
                        totals["drift_ratio"], rel=1e-12
                    )
    _passed(7, "accounting oracle equivalence over 1,000 chains, both group keys")


def test_criterion_8_durability(tmp_path):
    """Kill-and-restart over the file store with 120 chains, plus a
    truncated-final-line recovery with no chain corruption."""
    path = tmp_path / "events.jsonl"
    store = FileEventStore(path)
    rng = random.Random(7919)
    expected: dict[str, list[bytes]] = {}
    for _ in range(120):
        chain = support.random_chain(rng)
        for env in chain:
            store.append(PhaseEvent.snapshot(env))
        expected[chain[0].envelope_id] = [encode_canonical(env) for env in chain]
    # Simulated kill: drop the handle without closing.
    del store

    reopened = FileEventStore(path)
    assert reopened.envelope_ids() == sorted(expected)
    for envelope_id, documents in expected.items():
        assert [e.document for e in reopened.load(envelope_id)] == documents
    reopened.close()

    intact = path.read_bytes()
    path.write_bytes(intact + b'{"envelope_id": "01HALFWRITTEN')
    import logging

    records = []

    class Capture(logging.Handler):
        def emit(self, record):
            records.append(record.getMessage())

    handler = Capture()
    logging.getLogger("execution_envelope.store").addHandler(handler)
    try:
        recovered = FileEventStore(path)
    finally:
        logging.getLogger("execution_envelope.store").removeHandler(handler)
    assert any("corrupt trailing line" in message for message in records)
    assert path.read_bytes() == intact
    for envelope_id, documents in expected.items():
        assert [e.document for e in recovered.load(envelope_id)] == documents
    _passed(8, "durability: 120 chains survive restart; truncated line dropped with warning")


def test_criterion_9_worked_example_end_to_end():
    """The vllm / gpu_count=1 / us-east / audit-hint request produces a
    finalized chain whose admission snapshot matches the golden admission
    document field-for-field (modulo generated id and timestamp) and whose
    finalized snapshot carries the runtime identity."""
    client, store = _make_client(pipeline=True, seed=1)
    response = client.post(
        "/serving/deploy_model",
        json={
            "model_uri": "models://tenant-a/llm-7b",
            "engine": "vllm",
            "gpu_count": 1,
            "placement_preference": "us-east",
            "audit_event": "deploy_requested",
            "sensitivity_tag": "internal",
            "workspace_id": "ws-alpha",
            "deployment_group_id": "dg-main",
        },
        headers=support.IDENTITY,
    )
    assert response.status_code == 200
    envelope_id = response.json()["envelope_id"]
    chain = store.load(envelope_id)
    assert [event.phase for event in chain] == [
        LifecyclePhase.ADMISSION,
        LifecyclePhase.RESOLVED,
        LifecyclePhase.FINALIZED,
    ]

    golden = json.loads(support.read_golden("admission"))
    produced = json.loads(chain[0].document)
    produced["envelope_id"] = golden["envelope_id"]
    produced["caller"]["admitted_at"] = golden["caller"]["admitted_at"]
    assert produced == golden, "admission snapshot must match the golden example field-for-field"

    finalized = json.loads(chain[2].document)
    deployment_id = finalized["resolution"]["deployment_id"]
    assert deployment_id == "dep-" + envelope_id[-10:].lower()
    assert finalized["resolution"]["serve_path"] == f"/serve/{deployment_id}"
    assert finalized["resolution"]["public_path"] == "/v1/models/llm-7b"
    assert finalized["granted"] == {
        "engine": "vllm",
        "gpu_count": 1,
        "cpu_millicores": 4000,
        "memory_mb": 16384,
    }
    _passed(9, "worked deploy example end to end (golden admission match, runtime identity)")
