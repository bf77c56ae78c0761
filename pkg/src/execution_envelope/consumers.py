"""Reference downstream consumers: structured log lines and drift accounting.

Both consumers read only phase events from the store - never the HTTP
layer's request objects - so they demonstrate that one stored contract is
enough to reconstruct who asked for what and what was granted. Log lines
are intentionally thin joins back to the store (no resource payloads);
the aggregator folds terminal snapshots into per-group totals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Iterable, Mapping

from . import codec
from .model import NUMERIC_DIMENSIONS
from .store import PhaseEvent

GROUP_KEYS = ("tenant", "requester_urn")


def emit_log(event: PhaseEvent) -> str:
    """One canonical JSON log line for a phase event.

    Fields: envelope_id, sequence, phase, tenant, requester_urn,
    execution.kind, execution.operation, and failure.code when the event
    is a failure. Resource payloads are never dumped; the envelope_id is
    the join key back to the store.
    """
    envelope = codec.decode(event.document)
    record: dict = {
        "envelope_id": event.envelope_id,
        "sequence": event.sequence,
        "phase": event.phase.value,
        "tenant": envelope.caller.tenant,
        "requester_urn": envelope.caller.requester_urn,
        "execution.kind": envelope.execution.kind.value,
        "execution.operation": envelope.execution.operation,
    }
    if envelope.failure is not None:
        record["failure.code"] = envelope.failure.code
    return codec.canonical_bytes(record).decode("utf-8")


class LogEmitter:
    """Writes one log line per observed event to a text stream."""

    def __init__(self, stream: IO[str]):
        self._stream = stream

    def emit(self, event: PhaseEvent) -> None:
        self._stream.write(emit_log(event) + "\n")

    def emit_all(self, events: Iterable[PhaseEvent]) -> int:
        count = 0
        for event in events:
            self.emit(event)
            count += 1
        return count


@dataclass(frozen=True, slots=True)
class DimensionTotals:
    """Requested/granted sums for one numeric resource dimension."""

    requested_sum: int
    granted_sum: int
    drift_ratio: float | None

    def to_wire(self) -> dict:
        out: dict = {"requested_sum": self.requested_sum, "granted_sum": self.granted_sum}
        if self.drift_ratio is not None:
            out["drift_ratio"] = self.drift_ratio
        return out


@dataclass(frozen=True, slots=True)
class AccountingSummary:
    """Per-group accounting over terminal snapshots.

    A chain always contributes its requested block; it contributes its
    granted block only when the terminal snapshot carries one (a grant
    that existed is an accounting fact even if finalization later
    failed).
    """

    group_key: str
    totals: Mapping[str, DimensionTotals]
    failure_counts: Mapping[str, int]
    chain_counts: Mapping[str, int]

    def to_wire(self) -> dict:
        return {
            "group_key": self.group_key,
            "totals": {name: totals.to_wire() for name, totals in self.totals.items()},
            "failure_counts": dict(self.failure_counts),
            "chain_counts": dict(self.chain_counts),
        }


def aggregate(events: Iterable[PhaseEvent], group_by: str = "tenant") -> list[AccountingSummary]:
    """Fold all chains into per-group requested/granted totals.

    ``group_by`` is ``tenant`` or ``requester_urn``. Deterministic:
    summaries sorted by group key, dimensions by name. ``drift_ratio`` is
    granted_sum / requested_sum, absent when requested_sum is zero.
    """
    if group_by not in GROUP_KEYS:
        raise ValueError(f"group_by must be one of {GROUP_KEYS}, got {group_by!r}")

    terminal: dict[str, PhaseEvent] = {}
    for event in events:
        current = terminal.get(event.envelope_id)
        if current is None or event.sequence > current.sequence:
            terminal[event.envelope_id] = event

    requested_sums: dict[str, dict[str, int]] = {}
    granted_sums: dict[str, dict[str, int]] = {}
    failure_counts: dict[str, dict[str, int]] = {}
    chain_counts: dict[str, dict[str, int]] = {}

    for event in terminal.values():
        envelope = codec.decode(event.document)
        key = (
            envelope.caller.tenant if group_by == "tenant" else envelope.caller.requester_urn
        )
        chain_counts.setdefault(key, {})
        phase = envelope.phase.value
        chain_counts[key][phase] = chain_counts[key].get(phase, 0) + 1
        if envelope.failure is not None:
            stage = envelope.failure.stage.value
            failure_counts.setdefault(key, {})
            failure_counts[key][stage] = failure_counts[key].get(stage, 0) + 1
        req = requested_sums.setdefault(key, {})
        for name in NUMERIC_DIMENSIONS:
            value = getattr(envelope.resources_requested, name)
            if value is not None:
                req[name] = req.get(name, 0) + value
        if envelope.resources_granted is not None:
            got = granted_sums.setdefault(key, {})
            for name in NUMERIC_DIMENSIONS:
                value = getattr(envelope.resources_granted, name)
                if value is not None:
                    got[name] = got.get(name, 0) + value

    summaries = []
    for key in sorted(chain_counts):
        req = requested_sums.get(key, {})
        got = granted_sums.get(key, {})
        totals = {}
        for name in NUMERIC_DIMENSIONS:
            if name not in req and name not in got:
                continue
            requested_sum = req.get(name, 0)
            granted_sum = got.get(name, 0)
            ratio = granted_sum / requested_sum if requested_sum > 0 else None
            totals[name] = DimensionTotals(
                requested_sum=requested_sum, granted_sum=granted_sum, drift_ratio=ratio
            )
        summaries.append(
            AccountingSummary(
                group_key=key,
                totals=totals,
                failure_counts=dict(sorted(failure_counts.get(key, {}).items())),
                chain_counts=dict(sorted(chain_counts[key].items())),
            )
        )
    return summaries


def summaries_to_json(summaries: Iterable[AccountingSummary]) -> str:
    return json.dumps(
        [summary.to_wire() for summary in summaries], indent=2, sort_keys=True
    )
