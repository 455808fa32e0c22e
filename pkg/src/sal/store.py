"""Persistence: the append-only journal of milestones and the line state
derived from it.

The journal is the source of truth. Every build, certification, delivery,
state transition, release, and registration is one JSON object per line
in ``<line root>/.sal/journal.ndjson``, with explicit gap-free sequence
numbers. The materialized state is a pure function of the topology config
plus the event sequence, so it can always be rebuilt by replay; the
``state.json`` cache exists for inspection and is regenerable.

Appends are serialized by a line-wide advisory file lock and flushed to
disk before any state change becomes visible.
"""

from __future__ import annotations

import fcntl
import json
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

from .delivery import DeliveryRecord, DeliveryTicket
from .errors import AssemblyLineError
from .line_model import (
    CertificationRecord,
    InvalidTransition,
    LifecycleEvent,
    LineTopology,
    PackageRecord,
    PackageState,
    ReleaseNotFinal,
    transition,
)

EVENT_KINDS = ("Build", "Certify", "Deliver", "Transition", "Release", "Register")

JOURNAL_PATH = ".sal/journal.ndjson"
STATE_CACHE_PATH = ".sal/state.json"
LOCK_PATH = ".sal/lock"


class StorageFailure(AssemblyLineError):
    pass


class CorruptJournal(AssemblyLineError):
    def __init__(self, line: int, detail: str):
        super().__init__(f"journal line {line}: {detail}")
        self.line = line


class InvalidEventSequence(AssemblyLineError):
    """An event cannot apply to the replayed state; the journal and the
    workspaces it describes have diverged."""

    def __init__(self, seq: int, detail: str):
        super().__init__(f"event {seq}: {detail}")
        self.seq = seq


@dataclass(frozen=True, slots=True)
class Event:
    seq: int
    timestamp: str
    actor: str
    kind: str
    payload: dict

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "seq": self.seq,
                "ts": self.timestamp,
                "actor": self.actor,
                "kind": self.kind,
                "payload": self.payload,
            },
            sort_keys=True,
        )


@contextmanager
def _file_lock(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a+") as handle:
        fcntl.flock(handle.fileno(), fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(handle.fileno(), fcntl.LOCK_UN)


class Journal:
    """Append-only ndjson event log with gap-free sequence numbers."""

    def __init__(self, line_root: Path):
        self.line_root = Path(line_root)
        self.path = self.line_root / JOURNAL_PATH
        self.lock_path = self.line_root / LOCK_PATH
        self._thread_lock = threading.Lock()

    def append(self, kind: str, actor: str, payload: dict, timestamp: str) -> Event:
        """Assign the next sequence number and durably append one event."""
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        with self._thread_lock, _file_lock(self.lock_path):
            last = 0
            if self.path.is_file():
                for event in self.read():
                    last = event.seq
            event = Event(last + 1, timestamp, actor, kind, payload)
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as handle:
                    handle.write(event.to_json_line() + "\n")
                    handle.flush()
                    os.fsync(handle.fileno())
            except OSError as exc:
                raise StorageFailure(f"cannot append to journal: {exc}") from None
            return event

    def read(self) -> list[Event]:
        """All events in order; validates structure and sequence continuity."""
        if not self.path.is_file():
            return []
        events: list[Event] = []
        text = self.path.read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError:
                raise CorruptJournal(lineno, "not a JSON object (truncated write?)") from None
            try:
                event = Event(
                    seq=int(raw["seq"]),
                    timestamp=str(raw["ts"]),
                    actor=str(raw["actor"]),
                    kind=str(raw["kind"]),
                    payload=dict(raw["payload"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise CorruptJournal(lineno, f"malformed event: {exc}") from None
            if event.kind not in EVENT_KINDS:
                raise CorruptJournal(lineno, f"unknown event kind {event.kind!r}")
            expected = events[-1].seq + 1 if events else 1
            if event.seq != expected:
                raise CorruptJournal(
                    lineno, f"sequence number {event.seq} where {expected} was expected"
                )
            events.append(event)
        return events


@dataclass
class LineState:
    """Everything the journal determines: package records, deliveries,
    certifications, and the released-artifact registry."""

    packages: dict[str, PackageRecord] = field(default_factory=dict)
    deliveries: dict[int, DeliveryRecord] = field(default_factory=dict)
    certifications: list[CertificationRecord] = field(default_factory=list)
    registry: dict[str, dict] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "packages": {
                pid: record.to_dict() for pid, record in sorted(self.packages.items())
            },
            "deliveries": {
                str(seq): record.to_dict() for seq, record in sorted(self.deliveries.items())
            },
            "certifications": [cert.to_dict() for cert in self.certifications],
            "registry": {name: dict(entry) for name, entry in sorted(self.registry.items())},
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))


def _require(condition: bool, seq: int, detail: str) -> None:
    if not condition:
        raise InvalidEventSequence(seq, detail)


def apply_event(state: LineState, event: Event, topology: LineTopology) -> None:
    """Apply one journaled event to the state, validating applicability.

    This is the single definition of what each event means; the live path
    and replay both go through it, which is what makes replay reproduce
    the live state exactly.
    """
    payload = event.payload
    seq = event.seq

    if event.kind == "Register":
        subject = payload.get("subject")
        if subject == "package":
            package = payload["package"]
            station = payload["station"]
            _require(package not in state.packages, seq, f"package {package!r} already exists")
            _require(
                any(s.id == station for s in topology.stations),
                seq,
                f"unknown station {station!r}",
            )
            state.packages[package] = PackageRecord(
                package_id=package,
                station_id=station,
                state=PackageState.DEVELOPMENT,
                responsible_owner=payload["owner"],
            )
        elif subject == "artifact":
            state.registry[payload["artifact"]] = {
                "provider": payload.get("provider", ""),
                "path": payload.get("path"),
            }
        else:
            raise InvalidEventSequence(seq, f"unknown Register subject {subject!r}")
        return

    if event.kind == "Transition":
        package = payload["package"]
        _require(package in state.packages, seq, f"unknown package {package!r}")
        record = state.packages[package]
        try:
            lifecycle = LifecycleEvent(payload["event"])
        except ValueError:
            raise InvalidEventSequence(seq, f"unknown lifecycle event {payload['event']!r}") from None
        try:
            updated = transition(
                record, lifecycle, at_final_station=topology.is_final(record.station_id)
            )
        except (InvalidTransition, ReleaseNotFinal) as exc:
            raise InvalidEventSequence(seq, str(exc)) from None
        _require(
            updated.state.value == payload["to"],
            seq,
            f"transition lands in {updated.state.value}, event claims {payload['to']!r}",
        )
        state.packages[package] = updated
        return

    if event.kind == "Build":
        package = payload["package"]
        _require(package in state.packages, seq, f"unknown package {package!r}")
        return

    if event.kind == "Certify":
        package = payload["package"]
        _require(package in state.packages, seq, f"unknown package {package!r}")
        record = state.packages[package]
        cert = CertificationRecord(
            package_id=package,
            station_id=payload["station"],
            timestamp=event.timestamp,
            test_outcomes=tuple((str(c), int(x)) for c, x in payload["test_outcomes"]),
            tool_manifest=tuple(tuple(str(v) for v in t) for t in payload["tool_manifest"]),
            result=payload["result"],
        )
        state.certifications.append(cert)
        updated = replace(record, last_certification=cert)
        if cert.passed:
            updated = replace(updated, primaries_manifest=dict(payload["primaries"]))
        state.packages[package] = updated
        return

    if event.kind == "Deliver":
        phase = payload.get("phase")
        if phase == "ticket":
            ticket = DeliveryTicket(
                package_id=payload["package"],
                from_station=payload["from"],
                to_station=payload["to"],
                requested_by=payload["requested_by"],
                created=event.timestamp,
                ticket_id=seq,
            )
            _require(payload["package"] in state.packages, seq, "ticket for unknown package")
            state.deliveries[seq] = DeliveryRecord(ticket, "", {}, "requested")
        elif phase == "executed":
            ticket_id = int(payload["ticket"])
            _require(ticket_id in state.deliveries, seq, f"no ticket {ticket_id}")
            entry = state.deliveries[ticket_id]
            _require(
                entry.responsibility == "requested",
                seq,
                f"ticket {ticket_id} is {entry.responsibility}, not requested",
            )
            destination = payload["destination"]
            _require(destination in state.packages, seq, f"unknown package {destination!r}")
            state.deliveries[ticket_id] = replace(
                entry,
                destination_package=destination,
                moved=dict(payload["moved"]),
                responsibility="pending",
            )
            dest_record = state.packages[destination]
            state.packages[destination] = replace(
                dest_record, responsible_owner=payload["responsible_owner"]
            )
        elif phase == "transferred":
            ticket_id = int(payload["ticket"])
            _require(ticket_id in state.deliveries, seq, f"no ticket {ticket_id}")
            entry = state.deliveries[ticket_id]
            _require(
                entry.responsibility == "pending",
                seq,
                f"ticket {ticket_id} is {entry.responsibility}, not pending",
            )
            state.deliveries[ticket_id] = replace(entry, responsibility="transferred")
            destination = entry.destination_package
            _require(destination in state.packages, seq, f"unknown package {destination!r}")
            state.packages[destination] = replace(
                state.packages[destination], responsible_owner=payload["new_owner"]
            )
        else:
            raise InvalidEventSequence(seq, f"unknown Deliver phase {phase!r}")
        return

    if event.kind == "Release":
        package = payload["package"]
        _require(package in state.packages, seq, f"unknown package {package!r}")
        record = state.packages[package]
        _require(
            record.state is PackageState.CERTIFIED,
            seq,
            f"release of {package!r} in state {record.state.value}",
        )
        _require(
            topology.is_final(record.station_id),
            seq,
            f"release at non-final station {record.station_id!r}",
        )
        return

    raise InvalidEventSequence(seq, f"unknown event kind {event.kind!r}")


def replay(topology: LineTopology, journal: Journal) -> LineState:
    """Rebuild the line state from nothing but the config and the journal."""
    state = LineState()
    for event in journal.read():
        apply_event(state, event, topology)
    return state


def write_state_cache(line_root: Path, state: LineState) -> None:
    path = line_root / STATE_CACHE_PATH
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(state.to_json_dict(), sort_keys=True, indent=2) + "\n")
    os.replace(tmp, path)


def read_state_cache(line_root: Path) -> dict | None:
    path = line_root / STATE_CACHE_PATH
    if not path.is_file():
        return None
    return json.loads(path.read_text())
