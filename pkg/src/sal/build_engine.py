"""Incremental execution of a package recipe.

Staleness is decided by content digests, never timestamps: files copied
between station directories keep their identity, so a target is rebuilt
exactly when an ingredient's bytes changed since the digests recorded at
the last successful build. Recorded digests live in
``<workspace>/.sal/fingerprints``, one ``<hex digest> <file name>`` line
per file, sorted by file name.

Commands are run through an injectable runner so tests can substitute
stub tools for real compilers.
"""

from __future__ import annotations

import hashlib
import os
import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol

from .errors import AssemblyLineError, FileMissing
from .recipe_dsl import Recipe

_FINGERPRINT_FILE = ".sal/fingerprints"
_MATERIALIZED_FILE = ".sal/materialized"


class UnknownTarget(AssemblyLineError):
    def __init__(self, goal: str):
        super().__init__(f"no rule builds target {goal!r}")


class DependencyCycle(AssemblyLineError):
    def __init__(self, cycle: list[str]):
        super().__init__("rule dependencies form a cycle: " + " -> ".join(cycle))
        self.cycle = tuple(cycle)


class MissingIngredient(AssemblyLineError):
    def __init__(self, name: str, target: str):
        super().__init__(
            f"component {name!r} of rule {target!r} is not a target, not in the "
            "workspace, and not resolvable as an input"
        )
        self.name = name


class CommandFailed(AssemblyLineError):
    """A command exited nonzero; the build stopped at that point."""

    def __init__(self, target: str, command: str, exit_code: int, stderr: str, result: "BuildResult"):
        super().__init__(
            f"command for target {target!r} exited {exit_code}: {command!r}"
            + (f"\n{stderr.strip()}" if stderr.strip() else "")
        )
        self.target = target
        self.command = command
        self.exit_code = exit_code
        self.stderr = stderr
        self.result = result


@dataclass(frozen=True, slots=True)
class Fingerprint:
    """Content identity of one file: name plus sha256 of its bytes."""

    name: str
    digest: str


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_file(path: Path) -> str:
    hasher = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def fingerprint_tree(workspace: Path, names: Iterable[str]) -> frozenset[Fingerprint]:
    """Fingerprint the named files under workspace; all must exist."""
    prints = set()
    for name in sorted(names):
        path = workspace / name
        if not path.is_file():
            raise FileMissing(name, str(workspace))
        prints.add(Fingerprint(name, digest_file(path)))
    return frozenset(prints)


def load_fingerprints(workspace: Path) -> dict[str, str]:
    """Read the recorded digest map, empty if never built."""
    path = workspace / _FINGERPRINT_FILE
    if not path.is_file():
        return {}
    recorded = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        digest, _, name = line.partition(" ")
        recorded[name] = digest
    return recorded


def save_fingerprints(workspace: Path, recorded: Mapping[str, str]) -> None:
    path = workspace / _FINGERPRINT_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{recorded[name]} {name}" for name in sorted(recorded)]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


@dataclass(frozen=True, slots=True)
class CommandResult:
    exit_code: int
    stdout: str
    stderr: str


class CommandRunner(Protocol):
    def run(self, command: str, workspace: Path) -> CommandResult: ...


class SubprocessRunner:
    """Runs command lines through the shell with the workspace as cwd.

    The workspace and any extra directories (tool locations resolved by
    the caller) are prepended to PATH so tool files that live in package
    roots are found by bare name.
    """

    def __init__(self, extra_path: Iterable[Path] = ()):
        self.extra_path = tuple(extra_path)

    def run(self, command: str, workspace: Path) -> CommandResult:
        env = dict(os.environ)
        prefix = [str(workspace)] + [str(p) for p in self.extra_path]
        env["PATH"] = ":".join(prefix + [env.get("PATH", "")])
        proc = subprocess.run(
            command,
            shell=True,
            cwd=workspace,
            env=env,
            capture_output=True,
            text=True,
        )
        return CommandResult(proc.returncode, proc.stdout, proc.stderr)


@dataclass(frozen=True, slots=True)
class PlanEntry:
    target: str
    components: tuple[str, ...]
    commands: tuple[str, ...]


@dataclass(frozen=True, slots=True)
class BuildPlan:
    """Rules to execute, topologically ordered: a rule appears after every
    rule that produces one of its components."""

    goal: str
    entries: tuple[PlanEntry, ...]

    def __bool__(self) -> bool:
        return bool(self.entries)

    @property
    def targets(self) -> tuple[str, ...]:
        return tuple(entry.target for entry in self.entries)


@dataclass(frozen=True, slots=True)
class CommandLog:
    target: str
    command: str
    exit_code: int
    stdout: str
    stderr: str


@dataclass(frozen=True, slots=True)
class BuildResult:
    status: str  # "success" | "failure"
    executed: tuple[str, ...]
    log: tuple[CommandLog, ...]
    new_fingerprints: frozenset[Fingerprint]


def _normalize_recorded(recorded: Mapping[str, str] | Iterable[Fingerprint]) -> dict[str, str]:
    if isinstance(recorded, Mapping):
        return dict(recorded)
    return {fp.name: fp.digest for fp in recorded}


def _check_acyclic(recipe: Recipe) -> None:
    rule_for = {rule.target: rule for rule in recipe.rules}
    state: dict[str, int] = {}  # 1 = on stack, 2 = done
    stack: list[str] = []

    def visit(target: str) -> None:
        state[target] = 1
        stack.append(target)
        for comp in rule_for[target].components:
            if comp not in rule_for:
                continue
            mark = state.get(comp)
            if mark == 1:
                cycle = stack[stack.index(comp) :] + [comp]
                raise DependencyCycle(cycle)
            if mark is None:
                visit(comp)
        stack.pop()
        state[target] = 2

    for target in sorted(rule_for):
        if target not in state:
            visit(target)


def plan_build(
    recipe: Recipe,
    goal: str,
    recorded: Mapping[str, str] | Iterable[Fingerprint],
    workspace: Path,
    external: Mapping[str, Path] | None = None,
) -> BuildPlan:
    """Compute the rules that must run to bring ``goal`` up to date.

    A rule is planned iff its target file is missing, any component's
    current digest differs from the recorded one, or a rule producing one
    of its components is itself planned. ``external`` maps input names to
    the paths where they live outside this workspace (other packages'
    roots, registered deliverables); those paths are authoritative for
    staleness even when a materialized copy exists locally.
    """
    recorded_map = _normalize_recorded(recorded)
    external = dict(external or {})
    rule_for = {rule.target: rule for rule in recipe.rules}
    if goal not in rule_for:
        raise UnknownTarget(goal)
    _check_acyclic(recipe)

    def current_digest(name: str, target: str) -> str | None:
        """Digest of the component's current bytes, None if absent."""
        source = external.get(name)
        if source is not None:
            if not Path(source).is_file():
                raise MissingIngredient(name, target)
            return digest_file(Path(source))
        path = workspace / name
        if path.is_file():
            return digest_file(path)
        if name in rule_for:
            return None  # produced by a planned rule
        raise MissingIngredient(name, target)

    planned: dict[str, bool] = {}
    order: list[str] = []

    def visit(target: str) -> bool:
        if target in planned:
            return planned[target]
        rule = rule_for[target]
        upstream = False
        for comp in sorted(rule.components):
            if comp in rule_for and visit(comp):
                upstream = True
        # Digest every component that is not about to be rebuilt; this also
        # rejects unresolvable non-target ingredients regardless of staleness.
        digests: dict[str, str | None] = {}
        for comp in rule.components:
            if comp in rule_for and planned[comp]:
                continue
            digests[comp] = current_digest(comp, target)
        stale = (
            upstream
            or not (workspace / target).is_file()
            or any(digests[c] != recorded_map.get(c) for c in digests)
        )
        planned[target] = stale
        if stale:
            order.append(target)
        return stale

    visit(goal)
    entries = tuple(
        PlanEntry(t, rule_for[t].components, rule_for[t].commands) for t in order
    )
    return BuildPlan(goal, entries)


def _record_materialized(workspace: Path, names: Iterable[str]) -> None:
    from .tipo import read_materialized  # local import to avoid a cycle

    known = set(read_materialized(workspace)) | set(names)
    path = workspace / _MATERIALIZED_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(sorted(known)) + ("\n" if known else ""))


def _materialize_externals(
    plan: BuildPlan, workspace: Path, external: Mapping[str, Path]
) -> list[str]:
    copied = []
    for entry in plan.entries:
        for comp in entry.components:
            source = external.get(comp)
            if source is None:
                continue
            dest = workspace / comp
            if dest.is_file() and digest_file(dest) == digest_file(Path(source)):
                continue
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(source, dest)
            shutil.copymode(source, dest)
            copied.append(comp)
    if copied:
        _record_materialized(workspace, copied)
    return copied


def execute_build(
    plan: BuildPlan,
    workspace: Path,
    runner: CommandRunner,
    external: Mapping[str, Path] | None = None,
) -> BuildResult:
    """Run the plan's commands in order, stopping at the first failure.

    Input files resolved from outside the workspace are copied in first
    so commands see them by name. On success the digests of every file
    touched by an executed rule are recorded; on failure nothing is
    recorded, so the next plan is computed from the last good state.
    """
    external = dict(external or {})
    _materialize_externals(plan, workspace, external)

    log: list[CommandLog] = []
    executed: list[str] = []
    for entry in plan.entries:
        for command in entry.commands:
            result = runner.run(command, workspace)
            log.append(
                CommandLog(entry.target, command, result.exit_code, result.stdout, result.stderr)
            )
            if result.exit_code != 0:
                partial = BuildResult("failure", tuple(executed), tuple(log), frozenset())
                raise CommandFailed(entry.target, command, result.exit_code, result.stderr, partial)
        executed.append(entry.target)

    touched: set[str] = set()
    for entry in plan.entries:
        touched.add(entry.target)
        touched.update(entry.components)
    fresh = set()
    for name in sorted(touched):
        path = workspace / name
        if path.is_file():
            fresh.add(Fingerprint(name, digest_file(path)))

    recorded = load_fingerprints(workspace)
    recorded.update({fp.name: fp.digest for fp in fresh})
    save_fingerprints(workspace, recorded)
    return BuildResult("success", tuple(executed), tuple(log), frozenset(fresh))
