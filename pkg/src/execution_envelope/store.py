"""Append-only phase-event storage keyed by envelope id.

Every event is a full canonical snapshot of the envelope at one phase, so
the chain for an id is self-contained: admission immutability is checked
by byte comparison at the storage boundary, and ``replay`` can verify
that each snapshot is producible from its predecessor by exactly one
lifecycle transition.

Two backends share one contract: ``InMemoryEventStore`` for tests and
embedding, and ``FileEventStore``, an append-only newline-delimited file
of canonical event records. Appends are serialized per store; reads see
only fully appended events.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Iterator

from . import codec, lifecycle
from .errors import (
    AdmissionFirst,
    BrokenChain,
    IllegalChain,
    ImmutabilityBreach,
    SnapshotMismatch,
    TerminalEnvelope,
)
from .ids import format_timestamp, parse_timestamp, utc_now_ms
from .model import ExecutionEnvelope, LifecyclePhase
from .lifecycle import is_legal_transition

logger = logging.getLogger(__name__)

TERMINAL_PHASES = frozenset({LifecyclePhase.FINALIZED, LifecyclePhase.FAILED})


@dataclass(frozen=True, slots=True)
class PhaseEvent:
    """One lifecycle transition under a stable envelope identity.

    ``document`` is the canonical envelope snapshot at that phase. The
    store assigns ``sequence`` on append; the value on an incoming event
    is ignored.
    """

    envelope_id: str
    sequence: int
    phase: LifecyclePhase
    recorded_at: datetime
    document: bytes

    @classmethod
    def snapshot(
        cls, envelope: ExecutionEnvelope, recorded_at: datetime | None = None
    ) -> "PhaseEvent":
        """Build an event from a valid envelope (encodes it canonically)."""
        return cls(
            envelope_id=envelope.envelope_id,
            sequence=0,
            phase=envelope.phase,
            recorded_at=recorded_at if recorded_at is not None else utc_now_ms(),
            document=codec.encode_canonical(envelope),
        )

    def to_wire(self) -> dict:
        return {
            "envelope_id": self.envelope_id,
            "sequence": self.sequence,
            "phase": self.phase.value,
            "recorded_at": format_timestamp(self.recorded_at),
            "document": json.loads(self.document.decode("utf-8")),
        }

    @classmethod
    def from_wire(cls, record: dict) -> "PhaseEvent":
        return cls(
            envelope_id=record["envelope_id"],
            sequence=record["sequence"],
            phase=LifecyclePhase(record["phase"]),
            recorded_at=parse_timestamp(record["recorded_at"]),
            document=codec.canonical_bytes(record["document"]),
        )


class EventStore:
    """Shared append/load/query logic over a per-id chain index.

    Subclasses supply durability by overriding ``_persist``.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._chains: dict[str, list[PhaseEvent]] = {}

    # -- write path ---------------------------------------------------------

    def append(self, event: PhaseEvent) -> int:
        """Validate against the stored tail and durably record the event.

        Returns the assigned sequence number (count of prior events for
        the envelope id). Rejections are atomic: a rejected event leaves
        no trace.
        """
        envelope = codec.decode(event.document)
        if envelope.envelope_id != event.envelope_id:
            raise ValueError(
                f"event envelope_id {event.envelope_id!r} does not match "
                f"document envelope_id {envelope.envelope_id!r}"
            )
        if envelope.phase != event.phase:
            raise ValueError(
                f"event phase {event.phase} does not match document phase {envelope.phase}"
            )
        with self._lock:
            tail = self._chains.get(event.envelope_id, [])
            sequence = len(tail)
            if sequence == 0:
                if envelope.phase != LifecyclePhase.ADMISSION:
                    raise AdmissionFirst(
                        f"first event for {event.envelope_id} must be admission, "
                        f"got {envelope.phase.value}"
                    )
            else:
                last = tail[-1]
                if last.phase in TERMINAL_PHASES:
                    raise TerminalEnvelope(
                        f"{event.envelope_id} is terminal at {last.phase.value}"
                    )
                if not is_legal_transition(last.phase, envelope.phase):
                    raise IllegalChain(
                        f"{last.phase.value} -> {envelope.phase.value} is not a legal transition"
                    )
                admitted = codec.decode(tail[0].document)
                if codec.admission_projection_bytes(envelope) != codec.admission_projection_bytes(
                    admitted
                ):
                    raise ImmutabilityBreach(
                        f"admission families of {event.envelope_id} differ from the "
                        "sequence-0 snapshot"
                    )
            stored = replace(event, sequence=sequence, phase=envelope.phase)
            self._persist(stored)
            self._chains.setdefault(event.envelope_id, []).append(stored)
            return sequence

    def _persist(self, event: PhaseEvent) -> None:
        """Durability hook; the in-memory base does nothing."""

    # -- read path ----------------------------------------------------------

    def load(self, envelope_id: str) -> list[PhaseEvent]:
        """All events for an id in sequence order; [] for unknown ids."""
        with self._lock:
            return list(self._chains.get(envelope_id, ()))

    def latest(self, envelope_id: str) -> PhaseEvent | None:
        events = self.load(envelope_id)
        return events[-1] if events else None

    def envelope_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._chains)

    def events(self) -> Iterator[PhaseEvent]:
        """Every stored event, grouped by envelope id, in sequence order."""
        with self._lock:
            chains = [list(chain) for _, chain in sorted(self._chains.items())]
        for chain in chains:
            yield from chain

    def query(
        self,
        phase: LifecyclePhase | str | None = None,
        tenant: str | None = None,
        requester_urn: str | None = None,
        execution_kind: str | None = None,
        time_range: tuple[datetime, datetime] | None = None,
    ) -> list[str]:
        """Envelope ids whose latest event matches every supplied filter.

        Linear scan; results sorted by envelope id.
        """
        if phase is not None and not isinstance(phase, LifecyclePhase):
            phase = LifecyclePhase(phase)
        out = []
        with self._lock:
            snapshot = {eid: chain[-1] for eid, chain in self._chains.items() if chain}
        for envelope_id, event in snapshot.items():
            if phase is not None and event.phase != phase:
                continue
            if time_range is not None:
                start, end = time_range
                if not (start <= event.recorded_at <= end):
                    continue
            if tenant is not None or requester_urn is not None or execution_kind is not None:
                envelope = codec.decode(event.document)
                if tenant is not None and envelope.caller.tenant != tenant:
                    continue
                if requester_urn is not None and envelope.caller.requester_urn != requester_urn:
                    continue
                if execution_kind is not None and envelope.execution.kind.value != execution_kind:
                    continue
            out.append(envelope_id)
        return sorted(out)


class InMemoryEventStore(EventStore):
    """Volatile store for tests and embedding."""


class FileEventStore(EventStore):
    """Append-only newline-delimited event log.

    One canonical JSON object per line with keys {document, envelope_id,
    phase, recorded_at, sequence}; the embedded document appears exactly
    in its canonical byte form. A corrupt trailing line (crash artifact)
    is truncated on open with a warning; corruption anywhere else refuses
    to open.
    """

    def __init__(self, path: str | Path, fsync: bool = True) -> None:
        super().__init__()
        self._path = Path(path)
        self._fsync = fsync
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._recover()
        self._handle = open(self._path, "ab")

    @property
    def path(self) -> Path:
        return self._path

    def _recover(self) -> None:
        if not self._path.exists():
            return
        raw = self._path.read_bytes()
        offset = 0
        valid_end = 0
        while offset < len(raw):
            newline = raw.find(b"\n", offset)
            end = newline if newline != -1 else len(raw)
            line = raw[offset:end]
            try:
                event = PhaseEvent.from_wire(json.loads(line.decode("utf-8")))
            except (ValueError, KeyError, TypeError) as exc:
                remainder = raw[end:].strip()
                if newline != -1 and remainder:
                    raise OSError(
                        f"{self._path}: corrupt event record at byte {offset}: {exc}"
                    ) from None
                logger.warning(
                    "%s: dropping corrupt trailing line at byte %d (%s)",
                    self._path,
                    offset,
                    exc,
                )
                with open(self._path, "r+b") as handle:
                    handle.truncate(valid_end)
                break
            self._chains.setdefault(event.envelope_id, []).append(event)
            valid_end = end + 1 if newline != -1 else end
            offset = valid_end
        for envelope_id, chain in self._chains.items():
            sequences = [event.sequence for event in chain]
            if sequences != list(range(len(chain))):
                raise OSError(
                    f"{self._path}: chain for {envelope_id} has non-contiguous sequences"
                )

    def _persist(self, event: PhaseEvent) -> None:
        line = codec.canonical_bytes(event.to_wire()) + b"\n"
        self._handle.write(line)
        self._handle.flush()
        if self._fsync:
            os.fsync(self._handle.fileno())

    def close(self) -> None:
        self._handle.close()


def replay(events: Iterable[PhaseEvent]) -> ExecutionEnvelope:
    """Verify a chain and return the envelope at its final event.

    Each snapshot must be reproducible from its predecessor by exactly
    one lifecycle transition; any rewrite of earlier fields surfaces as
    ``SnapshotMismatch``, any ordering problem as ``BrokenChain``.
    """
    events = list(events)
    if not events:
        raise BrokenChain("no events")
    first = events[0]
    if first.phase != LifecyclePhase.ADMISSION:
        raise BrokenChain(f"chain starts at {first.phase.value}, not admission")
    envelopes = [codec.decode(event.document) for event in events]
    for index, (event, envelope) in enumerate(zip(events, envelopes)):
        if event.sequence != index:
            raise BrokenChain(
                f"event {index} carries sequence {event.sequence}, expected {index}"
            )
        if envelope.envelope_id != envelopes[0].envelope_id:
            raise BrokenChain(
                f"event {index} switches envelope_id to {envelope.envelope_id!r}"
            )
        if envelope.phase != event.phase:
            raise BrokenChain(
                f"event {index} phase {event.phase.value} does not match its document"
            )
    for prev, cur, cur_event in zip(envelopes, envelopes[1:], events[1:]):
        if not is_legal_transition(prev.phase, cur.phase):
            raise BrokenChain(
                f"{prev.phase.value} -> {cur.phase.value} is not a legal transition"
            )
        reconstructed = _reapply(prev, cur)
        if codec.encode_canonical(reconstructed) != cur_event.document:
            raise SnapshotMismatch(
                f"sequence-{cur_event.sequence} snapshot is not producible from its "
                "predecessor by one transition"
            )
    return envelopes[-1]


def _reapply(prev: ExecutionEnvelope, cur: ExecutionEnvelope) -> ExecutionEnvelope:
    """Re-derive ``cur`` from ``prev`` using the single implied transition."""
    try:
        if cur.phase == LifecyclePhase.RESOLVED:
            return lifecycle.resolve(prev, cur.resources_granted, cur.resolution)
        if cur.phase == LifecyclePhase.FINALIZED:
            resolution = cur.resolution
            return lifecycle.finalize(
                prev,
                resolution.deployment_id if resolution else "",
                resolution.serve_path if resolution else "",
                resolution.public_path if resolution else "",
            )
        if cur.phase == LifecyclePhase.FAILED:
            failure = cur.failure
            return lifecycle.fail(prev, failure.stage, failure.reason, failure.code)
    except Exception as exc:
        raise SnapshotMismatch(f"transition to {cur.phase.value} not reproducible: {exc}") from exc
    raise BrokenChain(f"no transition targets phase {cur.phase.value}")
