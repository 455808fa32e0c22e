"""The live assembly line: one object per line root that loads the
topology, replays the journal, and runs operator actions end to end.

Every mutating action validates against the current state, appends its
events to the journal (durable before anything becomes visible), and
applies them through the same ``apply_event`` used by replay, so the
in-memory state and a fresh replay can never disagree.
"""

from __future__ import annotations

from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping

from . import delivery as delivery_ops
from .build_engine import (
    BuildResult,
    CommandFailed,
    CommandRunner,
    SubprocessRunner,
    digest_file,
    load_fingerprints,
    plan_build,
    execute_build,
)
from .errors import AssemblyLineError
from .line_model import (
    CertificationRecord,
    LifecycleEvent,
    LineConfigError,
    LineTopology,
    PackageRecord,
    PackageState,
    ProducerInfo,
    certify as run_certification,
    load_topology,
    transition,
)
from .delivery import DeliveryRecord, DestinationMissing, NotOwner, WrongStation
from .recipe_dsl import RECIPE_FILENAME, Recipe, expand_macros, parse_recipe
from .store import (
    Journal,
    LineState,
    apply_event,
    replay,
    read_state_cache,
    write_state_cache,
)
from .system_graph import SystemGraph, emit_system_structure, link_packages
from .tipo import NoOutput, PackageManifest, TipoList, extract_tipo

LINE_CONFIG = "line.json"


class UnknownPackage(AssemblyLineError):
    def __init__(self, package_id: str):
        super().__init__(f"no package {package_id!r} on the line")


class DuplicatePackage(AssemblyLineError):
    def __init__(self, package_id: str):
        super().__init__(f"package {package_id!r} already exists")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


class AssemblyLine:
    """Operations over one line root.

    ``runner`` overrides command execution entirely (tests); ``tool_path``
    adds directories to the command search path and the tool manifest
    resolution (stub tool sets, shared tool caches). ``fault_hook`` is a
    test seam called around journal appends.
    """

    def __init__(
        self,
        root: Path,
        runner: CommandRunner | None = None,
        tool_path: Iterable[Path] = (),
        fault_hook: Callable[[str], None] | None = None,
    ):
        self.root = Path(root)
        config = self.root / LINE_CONFIG
        if not config.is_file():
            raise LineConfigError(f"no {LINE_CONFIG} at {self.root}")
        if not (self.root / ".sal").is_dir():
            raise LineConfigError(f"line at {self.root} is not initialized (run `sal init`)")
        self.topology = load_topology(config.read_text())
        self.journal = Journal(self.root)
        self._runner = runner
        self.tool_path = tuple(Path(p) for p in tool_path)
        self.fault_hook = fault_hook
        self.state: LineState = replay(self.topology, self.journal)

    # --- plumbing -----------------------------------------------------------

    @classmethod
    def init_line(cls, root: Path, **kwargs) -> "AssemblyLine":
        """Create the on-disk line structure described by line.json."""
        root = Path(root)
        if (root / ".sal").exists():
            raise LineConfigError(f"line at {root} is already initialized")
        config = root / LINE_CONFIG
        if not config.is_file():
            raise LineConfigError(f"no {LINE_CONFIG} at {root}")
        topology = load_topology(config.read_text())
        (root / ".sal").mkdir(parents=True)
        (root / ".sal" / "journal.ndjson").touch()
        for station in topology.stations:
            cls._resolve_root(root, station.root).mkdir(parents=True, exist_ok=True)
        line = cls(root, **kwargs)
        write_state_cache(root, line.state)
        return line

    @staticmethod
    def _resolve_root(line_root: Path, station_root: str) -> Path:
        path = Path(station_root)
        return path if path.is_absolute() else line_root / path

    def station_root(self, station_id: str) -> Path:
        return self._resolve_root(self.root, self.topology.station(station_id).root)

    def package_record(self, package_id: str) -> PackageRecord:
        record = self.state.packages.get(package_id)
        if record is None:
            raise UnknownPackage(package_id)
        return record

    def package_root(self, package_id: str) -> Path:
        record = self.package_record(package_id)
        return self.station_root(record.station_id) / package_id

    def _fault(self, phase: str, kind: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(f"{phase}:{kind}")

    def _commit(self, actor: str, events: list[tuple[str, dict]]) -> list[int]:
        """Append and apply events in order; returns their sequence numbers."""
        seqs = []
        for kind, payload in events:
            timestamp = _now()
            self._fault("pre-append", kind)
            event = self.journal.append(kind, actor, payload, timestamp)
            self._fault("post-append", kind)
            apply_event(self.state, event, self.topology)
            seqs.append(event.seq)
        write_state_cache(self.root, self.state)
        return seqs

    # --- recipes and classification ------------------------------------------

    def package_recipe(self, package_id: str) -> Recipe:
        path = self.package_root(package_id) / RECIPE_FILENAME
        if not path.is_file():
            raise NoOutput(f"package {package_id!r} has no {RECIPE_FILENAME}")
        return expand_macros(parse_recipe(path.read_text()))

    def package_tipo(self, package_id: str) -> TipoList:
        recipe = self.package_recipe(package_id)
        manifest = PackageManifest.from_workspace(package_id, self.package_root(package_id))
        return extract_tipo(recipe, manifest)

    def system_tipos(self) -> dict[str, TipoList]:
        """Tipo lists for every package that has a parseable recipe."""
        tipos = {}
        for package_id in sorted(self.state.packages):
            try:
                tipos[package_id] = self.package_tipo(package_id)
            except AssemblyLineError:
                continue
        return tipos

    def system_graph(self) -> SystemGraph:
        return link_packages(self.system_tipos())

    def structure_document(self) -> str:
        tipos = self.system_tipos()
        return emit_system_structure(tipos, link_packages(tipos))

    def _producers(self, tipos: Mapping[str, TipoList]) -> dict[str, ProducerInfo]:
        producers: dict[str, ProducerInfo] = {}
        for package_id in sorted(tipos):
            record = self.state.packages[package_id]
            for artifact in tipos[package_id].deliverable_outputs:
                producers[artifact] = ProducerInfo(
                    package_id, record.state, self.package_root(package_id)
                )
        return producers

    def _registry_path(self, name: str) -> Path | None:
        entry = self.state.registry.get(name)
        if not entry or not entry.get("path"):
            return None
        path = Path(entry["path"])
        return path if path.is_absolute() else self.root / path

    def _external_inputs(
        self, tipo: TipoList, producers: Mapping[str, ProducerInfo]
    ) -> dict[str, Path]:
        """Where each input lives: the producing package's root, or the
        registered deliverable's path."""
        external: dict[str, Path] = {}
        for name in tipo.inputs:
            info = producers.get(name)
            if info is not None:
                external[name] = info.root / name
                continue
            registered = self._registry_path(name)
            if registered is not None:
                external[name] = registered
        return external

    def _tool_dirs(
        self, tipo: TipoList, producers: Mapping[str, ProducerInfo]
    ) -> tuple[Path, ...]:
        dirs = [producers[t].root for t in sorted(tipo.tools) if t in producers]
        return tuple(dict.fromkeys(dirs)) + self.tool_path

    def _runner_for(self, tool_dirs: tuple[Path, ...]) -> CommandRunner:
        if self._runner is not None:
            return self._runner
        return SubprocessRunner(extra_path=tool_dirs)

    # --- operator actions -----------------------------------------------------

    def add_package(self, station_id: str, package_id: str, actor: str = "") -> PackageRecord:
        station = self.topology.station(station_id)
        if package_id in self.state.packages:
            raise DuplicatePackage(package_id)
        if not package_id or "/" in package_id or any(c.isspace() for c in package_id):
            raise AssemblyLineError(f"invalid package id {package_id!r}")
        self.package_root_for(station_id, package_id).mkdir(parents=True, exist_ok=True)
        self._commit(
            actor or station.owner,
            [
                (
                    "Register",
                    {
                        "subject": "package",
                        "package": package_id,
                        "station": station_id,
                        "owner": station.owner,
                    },
                )
            ],
        )
        return self.state.packages[package_id]

    def package_root_for(self, station_id: str, package_id: str) -> Path:
        return self.station_root(station_id) / package_id

    def register_artifact(
        self, name: str, provider: str = "", path: str | None = None, actor: str = ""
    ) -> None:
        self._commit(
            actor or "-",
            [
                (
                    "Register",
                    {"subject": "artifact", "artifact": name, "provider": provider, "path": path},
                )
            ],
        )

    def build(self, package_id: str, goal: str | None = None, actor: str = "") -> BuildResult:
        record = self.package_record(package_id)
        recipe = self.package_recipe(package_id)
        if goal is None:
            if not recipe.rules:
                raise NoOutput(f"recipe of package {package_id!r} has no rules")
            goal = recipe.rules[0].target
        workspace = self.package_root(package_id)
        tipo = self.package_tipo(package_id)
        tipos = self.system_tipos()
        producers = self._producers(tipos)
        external = self._external_inputs(tipo, producers)
        tool_dirs = self._tool_dirs(tipo, producers)
        runner = self._runner_for(tool_dirs)
        actor = actor or self.topology.station(record.station_id).owner

        plan = plan_build(recipe, goal, load_fingerprints(workspace), workspace, external)

        events: list[tuple[str, dict]] = []
        if plan and record.state is not PackageState.DEVELOPMENT:
            # Content drifted since the last milestone: that is an edit.
            events.append(self._transition_payload(record, LifecycleEvent.EDIT))
            self._commit(actor, events)
            events = []
            record = self.package_record(package_id)

        base = {"package": package_id, "station": record.station_id, "goal": goal}
        try:
            result = execute_build(plan, workspace, runner, external)
        except CommandFailed as failure:
            events.append(
                (
                    "Build",
                    base
                    | {
                        "outcome": "failed",
                        "executed": list(failure.result.executed),
                        "fingerprints": {},
                        "failure": {
                            "target": failure.target,
                            "command": failure.command,
                            "exit_code": failure.exit_code,
                        },
                    },
                )
            )
            events.append(self._transition_payload(record, LifecycleEvent.BUILD_FAIL))
            self._commit(actor, events)
            raise

        outcome = "ok" if plan else "up-to-date"
        events.append(
            (
                "Build",
                base
                | {
                    "outcome": outcome,
                    "executed": list(result.executed),
                    "fingerprints": {fp.name: fp.digest for fp in sorted(result.new_fingerprints, key=lambda f: f.name)},
                },
            )
        )
        if record.state is PackageState.DEVELOPMENT:
            events.append(self._transition_payload(record, LifecycleEvent.BUILD_OK))
        self._commit(actor, events)
        return result

    def _transition_payload(
        self, record: PackageRecord, event: LifecycleEvent
    ) -> tuple[str, dict]:
        after = transition(
            record, event, at_final_station=self.topology.is_final(record.station_id)
        )
        return (
            "Transition",
            {
                "package": record.package_id,
                "station": record.station_id,
                "event": event.value,
                "from": record.state.value,
                "to": after.state.value,
            },
        )

    def certify(self, package_id: str, actor: str) -> CertificationRecord:
        record = self.package_record(package_id)
        station = self.topology.station(record.station_id)
        if actor != station.owner:
            raise NotOwner(actor, station.id, station.owner)
        recipe = self.package_recipe(package_id)
        workspace = self.package_root(package_id)
        tipo = self.package_tipo(package_id)
        tipos = self.system_tipos()
        producers = self._producers(tipos)
        external = self._external_inputs(tipo, producers)
        tool_dirs = self._tool_dirs(tipo, producers)

        cert = run_certification(
            record,
            tipo,
            self._runner_for(tool_dirs),
            recipe=recipe,
            workspace=workspace,
            producers=producers,
            external=external,
            search_path=tool_dirs,
            timestamp=_now(),
        )

        primaries = {
            name: digest_file(workspace / name)
            for name in sorted(tipo.primaries)
            if (workspace / name).is_file()
        }
        events = [
            (
                "Certify",
                {
                    "package": package_id,
                    "station": record.station_id,
                    "result": cert.result,
                    "test_outcomes": [list(o) for o in cert.test_outcomes],
                    "tool_manifest": [list(t) for t in cert.tool_manifest],
                    "primaries": primaries,
                },
            ),
            self._transition_payload(
                record,
                LifecycleEvent.CERT_OK if cert.passed else LifecycleEvent.CERT_FAIL,
            ),
        ]
        self._commit(actor, events)

        if cert.passed:
            self._transfer_pending_deliveries(package_id, actor)
        return self.package_record(package_id).last_certification or cert

    def _transfer_pending_deliveries(self, package_id: str, actor: str) -> None:
        record = self.package_record(package_id)
        cert = record.last_certification
        assert cert is not None
        new_owner = self.topology.station(record.station_id).owner
        events = []
        for seq in sorted(self.state.deliveries):
            entry = self.state.deliveries[seq]
            if entry.destination_package != package_id or entry.responsibility != "pending":
                continue
            delivery_ops.transfer_responsibility(entry, cert, new_owner=new_owner)
            events.append(
                (
                    "Deliver",
                    {"phase": "transferred", "ticket": seq, "new_owner": new_owner},
                )
            )
        if events:
            self._commit(actor, events)

    def deliver(
        self,
        package_id: str,
        from_station: str,
        to_station: str,
        into_package: str,
        actor: str,
    ) -> DeliveryRecord:
        record = self.package_record(package_id)
        ticket = delivery_ops.request_delivery(
            record, from_station, to_station, actor, topology=self.topology, created=_now()
        )
        destination = self.state.packages.get(into_package)
        if destination is None:
            raise DestinationMissing(into_package, "no such package on the line")
        if destination.station_id != to_station:
            raise WrongStation(
                f"package {into_package!r} lives at {destination.station_id!r}, not {to_station!r}"
            )

        seqs = self._commit(
            actor,
            [
                (
                    "Deliver",
                    {
                        "phase": "ticket",
                        "package": package_id,
                        "from": from_station,
                        "to": to_station,
                        "requested_by": actor,
                    },
                )
            ],
        )
        ticket_seq = seqs[0]
        stored = self.state.deliveries[ticket_seq]

        source_tipo = self.package_tipo(package_id)
        dest_recipe = self.package_recipe(into_package)
        dest_components = frozenset(c for rule in dest_recipe.rules for c in rule.components)
        prior_claims = {
            name: entry.ticket.package_id
            for seq in sorted(self.state.deliveries)
            for entry in [self.state.deliveries[seq]]
            if entry.destination_package == into_package
            and entry.responsibility in ("pending", "transferred")
            for name in entry.moved
        }

        delivered = delivery_ops.execute_delivery(
            stored.ticket,
            into_package,
            source_root=self.package_root(package_id),
            destination_root=self.package_root(into_package),
            source_tipo=source_tipo,
            certified_manifest=record.primaries_manifest,
            destination_components=dest_components,
            prior_claims=prior_claims,
        )

        source_owner = self.topology.station(from_station).owner
        self._commit(
            actor,
            [
                (
                    "Deliver",
                    {
                        "phase": "executed",
                        "ticket": ticket_seq,
                        "package": package_id,
                        "destination": into_package,
                        "moved": dict(sorted(delivered.moved.items())),
                        "responsible_owner": source_owner,
                    },
                ),
                self._transition_payload(destination, LifecycleEvent.ARRIVE),
            ],
        )
        return self.state.deliveries[ticket_seq]

    def release(self, package_id: str, actor: str) -> PackageRecord:
        record = self.package_record(package_id)
        station = self.topology.station(record.station_id)
        if actor != station.owner:
            raise NotOwner(actor, station.id, station.owner)
        # Validates state and finality before any event is written.
        transition(
            record,
            LifecycleEvent.RELEASE,
            at_final_station=self.topology.is_final(record.station_id),
        )
        events = [
            ("Release", {"package": package_id, "station": record.station_id}),
            self._transition_payload(record, LifecycleEvent.RELEASE),
        ]
        # A released product's outputs become registered deliverables.
        tipo = self.package_tipo(package_id)
        root = self.package_root(package_id)
        for artifact in sorted(tipo.deliverable_outputs):
            path = root / artifact
            if path.is_file():
                events.append(
                    (
                        "Register",
                        {
                            "subject": "artifact",
                            "artifact": artifact,
                            "provider": package_id,
                            "path": str(path.relative_to(self.root))
                            if path.is_relative_to(self.root)
                            else str(path),
                        },
                    )
                )
        self._commit(actor, events)
        return self.package_record(package_id)

    # --- read-only views -------------------------------------------------------

    def status_rows(self) -> list[tuple[str, str, str, str]]:
        """(station, owner, package, state) rows, deterministically sorted."""
        rows = []
        for package_id in sorted(self.state.packages):
            record = self.state.packages[package_id]
            rows.append(
                (
                    record.station_id,
                    record.responsible_owner,
                    package_id,
                    record.state.value,
                )
            )
        rows.sort()
        return rows

    def log_events(self, package_id: str | None = None):
        events = self.journal.read()
        if package_id is None:
            return events
        return [e for e in events if e.payload.get("package") == package_id]

    def fsck(self, rebuild: bool = False) -> list[str]:
        """Verify the journal replays and the state cache matches it."""
        report = []
        state = replay(self.topology, self.journal)
        report.append(f"journal: {len(self.journal.read())} events, replay ok")
        cache = read_state_cache(self.root)
        if cache is None:
            report.append("state cache: missing")
            matches = False
        else:
            matches = cache == state.to_json_dict()
            report.append("state cache: matches replay" if matches else "state cache: STALE")
        if rebuild:
            write_state_cache(self.root, state)
            self.state = state
            report.append("state cache: rebuilt from journal")
        elif not matches:
            raise AssemblyLineError(
                "state cache does not match journal replay (run fsck --rebuild)"
            )
        return report


def find_line_root(start: Path) -> Path | None:
    """Nearest ancestor (including start) containing a .sal directory."""
    current = Path(start).resolve()
    for candidate in [current, *current.parents]:
        if (candidate / ".sal").is_dir():
            return candidate
    return None
