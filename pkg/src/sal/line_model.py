"""The assembly line: station topology, package lifecycle, certification.

Stations form an acyclic graph of delivery edges, from entry stations
(programmer workbenches) to final stations (where deliverable products
are released). Each station has one responsible owner. A package moves
through four lifecycle states; transitions are the measurable milestones
the journal records.

Certification runs the package's ``test`` target and pins the identity of
every tool in a manifest: confidence in an output starts with confidence
in the tools, so a tool built on the line must itself be certified before
any package that uses it can be.
"""

from __future__ import annotations

import enum
import json
import posixpath
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

from .build_engine import (
    CommandFailed,
    CommandRunner,
    digest_file,
    execute_build,
    load_fingerprints,
    plan_build,
)
from .errors import AssemblyLineError
from .recipe_dsl import TEST_TARGET, Recipe
from .tipo import TipoList


class LineConfigError(AssemblyLineError):
    """The topology config is malformed."""


class DuplicateStation(AssemblyLineError):
    pass


class UnknownStation(AssemblyLineError):
    def __init__(self, station_id: str):
        super().__init__(f"no station {station_id!r} on the line")


class SharedRoot(AssemblyLineError):
    pass


class TopologyCycle(AssemblyLineError):
    pass


class NoFinalStation(AssemblyLineError):
    pass


class InvalidTransition(AssemblyLineError):
    def __init__(self, state: "PackageState", event: "LifecycleEvent", detail: str = ""):
        message = f"event {event.value} does not apply in state {state.value}"
        if detail:
            message += f": {detail}"
        super().__init__(message)
        self.state = state
        self.event = event


class ReleaseNotFinal(AssemblyLineError):
    def __init__(self, station_id: str):
        super().__init__(f"station {station_id!r} is not final; products release only at final stations")


class ToolNotCertified(AssemblyLineError):
    def __init__(self, tool: str, producer: str, state: str):
        super().__init__(
            f"tool {tool!r} is produced by package {producer!r} which is {state}, "
            "not certified; certification of products starts with certification of tools"
        )
        self.tool = tool
        self.producer = producer


class InputNotCertified(AssemblyLineError):
    def __init__(self, name: str, producer: str, state: str):
        super().__init__(
            f"input {name!r} is produced by package {producer!r} which is {state}, not certified"
        )
        self.name = name
        self.producer = producer


class NoTestTarget(AssemblyLineError):
    def __init__(self, package_id: str):
        super().__init__(
            f"recipe of package {package_id!r} has no {TEST_TARGET!r} target; certification cannot run"
        )


@dataclass(frozen=True, slots=True)
class Station:
    id: str
    owner: str
    root: str
    downstream: frozenset[str] = frozenset()


@dataclass(frozen=True)
class LineTopology:
    stations: tuple[Station, ...]

    def station(self, station_id: str) -> Station:
        for station in self.stations:
            if station.id == station_id:
                return station
        raise UnknownStation(station_id)

    def has_edge(self, from_id: str, to_id: str) -> bool:
        return to_id in self.station(from_id).downstream

    def is_final(self, station_id: str) -> bool:
        return not self.station(station_id).downstream

    @property
    def entry_stations(self) -> tuple[str, ...]:
        targets = {d for s in self.stations for d in s.downstream}
        return tuple(sorted(s.id for s in self.stations if s.id not in targets))

    @property
    def final_stations(self) -> tuple[str, ...]:
        return tuple(sorted(s.id for s in self.stations if not s.downstream))


def load_topology(config_text: str) -> LineTopology:
    """Parse and validate a line config (JSON, see the repo docs for the
    schema): unique ids, disjoint roots, acyclic delivery edges, at least
    one final station."""
    try:
        raw = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise LineConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict) or not isinstance(raw.get("stations"), list):
        raise LineConfigError("config must be an object with a 'stations' array")

    stations: list[Station] = []
    ids: set[str] = set()
    for entry in raw["stations"]:
        if not isinstance(entry, dict):
            raise LineConfigError("station entries must be objects")
        try:
            station = Station(
                id=str(entry["id"]),
                owner=str(entry["owner"]),
                root=str(entry["root"]),
                downstream=frozenset(str(d) for d in entry.get("downstream", [])),
            )
        except KeyError as exc:
            raise LineConfigError(f"station entry is missing field {exc.args[0]!r}") from None
        if station.id in ids:
            raise DuplicateStation(f"station id {station.id!r} appears twice")
        ids.add(station.id)
        stations.append(station)

    for station in stations:
        for target in station.downstream:
            if target not in ids:
                raise LineConfigError(
                    f"station {station.id!r} delivers to unknown station {target!r}"
                )
        if station.id in station.downstream:
            raise TopologyCycle(f"station {station.id!r} delivers to itself")

    _check_disjoint_roots(stations)
    _check_acyclic(stations)

    topology = LineTopology(tuple(stations))
    if not topology.final_stations:
        raise NoFinalStation("the line has no final station")
    return topology


def _check_disjoint_roots(stations: list[Station]) -> None:
    normalized = [(posixpath.normpath(s.root), s.id) for s in stations]
    for i, (root_a, id_a) in enumerate(normalized):
        for root_b, id_b in normalized[i + 1 :]:
            if (
                root_a == root_b
                or root_a.startswith(root_b + "/")
                or root_b.startswith(root_a + "/")
            ):
                raise SharedRoot(
                    f"stations {id_a!r} and {id_b!r} share root directory space"
                )


def _check_acyclic(stations: list[Station]) -> None:
    graph = {s.id: sorted(s.downstream) for s in stations}
    state: dict[str, int] = {}
    stack: list[str] = []

    def visit(node: str) -> None:
        state[node] = 1
        stack.append(node)
        for succ in graph[node]:
            mark = state.get(succ)
            if mark == 1:
                cycle = stack[stack.index(succ) :] + [succ]
                raise TopologyCycle("delivery edges form a cycle: " + " -> ".join(cycle))
            if mark is None:
                visit(succ)
        stack.pop()
        state[node] = 2

    for node in sorted(graph):
        if node not in state:
            visit(node)


class PackageState(enum.Enum):
    DEVELOPMENT = "Development"
    BUILT = "Built"
    CERTIFIED = "Certified"
    RELEASED = "Released"


class LifecycleEvent(enum.Enum):
    EDIT = "Edit"
    BUILD_OK = "BuildOk"
    BUILD_FAIL = "BuildFail"
    CERT_OK = "CertOk"
    CERT_FAIL = "CertFail"
    ARRIVE = "Arrive"
    RELEASE = "Release"


_DEV = PackageState.DEVELOPMENT
_BUILT = PackageState.BUILT
_CERT = PackageState.CERTIFIED
_REL = PackageState.RELEASED

# The full transition table; anything absent is invalid. Every Edit lands in
# Development (repair), and Arrive (a delivery changing the package's files)
# behaves like an externally caused edit.
TRANSITIONS: dict[tuple[PackageState, LifecycleEvent], PackageState] = {
    (_DEV, LifecycleEvent.EDIT): _DEV,
    (_DEV, LifecycleEvent.BUILD_OK): _BUILT,
    (_DEV, LifecycleEvent.BUILD_FAIL): _DEV,
    (_BUILT, LifecycleEvent.EDIT): _DEV,
    (_BUILT, LifecycleEvent.CERT_OK): _CERT,
    (_BUILT, LifecycleEvent.CERT_FAIL): _DEV,
    (_CERT, LifecycleEvent.EDIT): _DEV,
    (_CERT, LifecycleEvent.RELEASE): _REL,
    (_REL, LifecycleEvent.EDIT): _DEV,
    (_DEV, LifecycleEvent.ARRIVE): _DEV,
    (_BUILT, LifecycleEvent.ARRIVE): _DEV,
    (_CERT, LifecycleEvent.ARRIVE): _DEV,
    (_REL, LifecycleEvent.ARRIVE): _DEV,
}


@dataclass(frozen=True)
class CertificationRecord:
    package_id: str
    station_id: str
    timestamp: str
    test_outcomes: tuple[tuple[str, int], ...]
    # (tool name, resolved path, digest, producing package id or "external")
    tool_manifest: tuple[tuple[str, str, str, str], ...]
    result: str  # "pass" | "fail"

    def __post_init__(self) -> None:
        all_ok = all(code == 0 for _, code in self.test_outcomes)
        if (self.result == "pass") != all_ok:
            raise ValueError("result must be 'pass' exactly when every command exited 0")

    @property
    def passed(self) -> bool:
        return self.result == "pass"

    def to_dict(self) -> dict:
        return {
            "package": self.package_id,
            "station": self.station_id,
            "timestamp": self.timestamp,
            "test_outcomes": [list(o) for o in self.test_outcomes],
            "tool_manifest": [list(t) for t in self.tool_manifest],
            "result": self.result,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "CertificationRecord":
        return cls(
            package_id=raw["package"],
            station_id=raw["station"],
            timestamp=raw["timestamp"],
            test_outcomes=tuple((str(c), int(x)) for c, x in raw["test_outcomes"]),
            tool_manifest=tuple(tuple(str(v) for v in t) for t in raw["tool_manifest"]),
            result=raw["result"],
        )


@dataclass(frozen=True)
class PackageRecord:
    package_id: str
    station_id: str
    state: PackageState = PackageState.DEVELOPMENT
    responsible_owner: str = ""
    primaries_manifest: dict[str, str] = field(default_factory=dict)
    last_certification: CertificationRecord | None = None

    def to_dict(self) -> dict:
        return {
            "package": self.package_id,
            "station": self.station_id,
            "state": self.state.value,
            "responsible_owner": self.responsible_owner,
            "primaries_manifest": dict(sorted(self.primaries_manifest.items())),
            "last_certification": (
                self.last_certification.to_dict() if self.last_certification else None
            ),
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "PackageRecord":
        return cls(
            package_id=raw["package"],
            station_id=raw["station"],
            state=PackageState(raw["state"]),
            responsible_owner=raw["responsible_owner"],
            primaries_manifest=dict(raw["primaries_manifest"]),
            last_certification=(
                CertificationRecord.from_dict(raw["last_certification"])
                if raw.get("last_certification")
                else None
            ),
        )


def transition(
    record: PackageRecord, event: LifecycleEvent, *, at_final_station: bool
) -> PackageRecord:
    """Apply one lifecycle event; pure, the caller persists the result."""
    if event is LifecycleEvent.RELEASE and record.state is PackageState.CERTIFIED:
        if not at_final_station:
            raise ReleaseNotFinal(record.station_id)
    key = (record.state, event)
    if key not in TRANSITIONS:
        detail = ""
        if event in (LifecycleEvent.CERT_OK, LifecycleEvent.CERT_FAIL):
            detail = "certification requires a built package"
        raise InvalidTransition(record.state, event, detail)
    return replace(record, state=TRANSITIONS[key])


@dataclass(frozen=True, slots=True)
class ProducerInfo:
    """Who produces an artifact on the line, and that package's state."""

    package_id: str
    state: PackageState
    root: Path


_CERTIFIED_STATES = (PackageState.CERTIFIED, PackageState.RELEASED)


def check_certification_gate(
    tipo: TipoList, producers: Mapping[str, ProducerInfo]
) -> None:
    """Every line-produced tool and input must come from a certified (or
    released) package before this package can be certified."""
    for name in sorted(tipo.tools):
        info = producers.get(name)
        if info is not None and info.state not in _CERTIFIED_STATES:
            raise ToolNotCertified(name, info.package_id, info.state.value)
    for name in sorted(tipo.inputs):
        info = producers.get(name)
        if info is not None and info.state not in _CERTIFIED_STATES:
            raise InputNotCertified(name, info.package_id, info.state.value)


def resolve_tool(
    name: str,
    workspace: Path,
    producers: Mapping[str, ProducerInfo],
    search_path: tuple[Path, ...] = (),
) -> tuple[str, str, str]:
    """Resolve a tool name to (path, digest, producer id or "external").

    Resolution order mirrors what the command runner will see: a file in
    this workspace, the producing package's root, the extra search
    directories, then the system PATH. Tools that cannot be found on disk
    are pinned with empty path and digest.
    """
    import shutil as _shutil

    producer = producers.get(name)
    candidates = [workspace / name]
    if producer is not None:
        candidates.append(producer.root / name)
    candidates.extend(directory / name for directory in search_path)
    path: Path | None = next((c for c in candidates if c.is_file()), None)
    if path is None:
        which = _shutil.which(name)
        path = Path(which) if which else None
    origin = producer.package_id if producer is not None else "external"
    if path is None:
        return "", "", origin
    return str(path), digest_file(path), origin


def certify(
    record: PackageRecord,
    tipo: TipoList,
    runner: CommandRunner,
    *,
    recipe: Recipe,
    workspace: Path,
    producers: Mapping[str, ProducerInfo],
    external: Mapping[str, Path] | None = None,
    search_path: tuple[Path, ...] = (),
    timestamp: str,
) -> CertificationRecord:
    """Run the package's test target and record the outcome with a pinned
    tool manifest. A pass means the caller applies CertOk; a fail means
    CertFail. Raises instead of recording when the gate is not met.
    """
    if record.state is not PackageState.BUILT:
        raise InvalidTransition(
            record.state, LifecycleEvent.CERT_OK, "certification requires a built package"
        )
    if TEST_TARGET not in recipe.targets:
        raise NoTestTarget(record.package_id)
    check_certification_gate(tipo, producers)

    manifest = tuple(
        (name, *resolve_tool(name, workspace, producers, search_path))
        for name in sorted(tipo.tools)
    )

    recorded = load_fingerprints(workspace)
    plan = plan_build(recipe, TEST_TARGET, recorded, workspace, external)
    try:
        result = execute_build(plan, workspace, runner, external)
        outcomes = tuple((entry.command, entry.exit_code) for entry in result.log)
        passed = all(code == 0 for _, code in outcomes)
    except CommandFailed as failure:
        outcomes = tuple((entry.command, entry.exit_code) for entry in failure.result.log)
        passed = False

    return CertificationRecord(
        package_id=record.package_id,
        station_id=record.station_id,
        timestamp=timestamp,
        test_outcomes=outcomes,
        tool_manifest=manifest,
        result="pass" if passed else "fail",
    )
