"""Command-line surface: every assembly-line action as a subcommand.

Exit codes are a stable contract for CI: 0 success, 1 domain error
(printed as ``ErrorName: message`` on stderr), 2 usage error. Mutating
subcommands append journal events; read-only ones never do.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .build_engine import CommandFailed
from .errors import AssemblyLineError
from .line import AssemblyLine, find_line_root
from .line_model import LineConfigError
from .tipo import render_tipo

_MUTATING_NEEDS_ACTOR = ("certify", "deliver", "release")


@dataclass(frozen=True)
class Invocation:
    subcommand: str
    line_root: Path
    actor: str | None


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sal",
        description="Software assembly line: build, certify, and deliver packages between stations.",
    )
    parser.add_argument(
        "--line",
        metavar="DIR",
        help="line root (default: $SAL_LINE or the nearest ancestor with .sal/)",
    )
    sub = parser.add_subparsers(dest="subcommand", metavar="COMMAND")

    sub.add_parser("init", help="create the line described by line.json")

    p = sub.add_parser("add-package", help="create an empty package at a station")
    p.add_argument("station")
    p.add_argument("package")
    p.add_argument("--as", dest="actor", metavar="OWNER")

    p = sub.add_parser("tipo", help="print the package's tool/input/primary/output list")
    p.add_argument("package")

    p = sub.add_parser("build", help="incrementally build a package target")
    p.add_argument("package")
    p.add_argument("target", nargs="?", default=None)
    p.add_argument("--as", dest="actor", metavar="OWNER")

    p = sub.add_parser("certify", help="run the package's test target and record the outcome")
    p.add_argument("package")
    p.add_argument("--as", dest="actor", metavar="OWNER")

    p = sub.add_parser("deliver", help="copy a certified package's primaries downstream")
    p.add_argument("package")
    p.add_argument("--from", dest="from_station", required=True, metavar="STATION")
    p.add_argument("--to", dest="to_station", required=True, metavar="STATION")
    p.add_argument("--into", dest="into_package", required=True, metavar="PACKAGE")
    p.add_argument("--as", dest="actor", metavar="OWNER")

    p = sub.add_parser("release", help="release a certified package at a final station")
    p.add_argument("package")
    p.add_argument("--as", dest="actor", metavar="OWNER")

    p = sub.add_parser("register", help="register an external deliverable artifact")
    p.add_argument("artifact")
    p.add_argument("--provider", default="")
    p.add_argument("--path", default=None, help="where consumers find the artifact")
    p.add_argument("--as", dest="actor", metavar="OWNER")

    p = sub.add_parser("graph", help="emit the system structure document")
    p.add_argument("-o", "--output", default=None, metavar="FILE")

    sub.add_parser("status", help="per-station package and state table")

    p = sub.add_parser("log", help="print the journal")
    p.add_argument("--pkg", default=None, metavar="PACKAGE")

    p = sub.add_parser("fsck", help="verify the journal and state cache")
    p.add_argument("--rebuild", action="store_true")

    return parser


def _resolve_line_root(flag: str | None) -> Path:
    if flag:
        return Path(flag)
    env = os.environ.get("SAL_LINE")
    if env:
        return Path(env)
    found = find_line_root(Path.cwd())
    if found is not None:
        return found
    return Path.cwd()


def _resolve_actor(args: argparse.Namespace) -> str | None:
    actor = getattr(args, "actor", None)
    return actor or os.environ.get("SAL_OWNER")


def _fault_hook_from_env():
    """SAL_FAULT=<phase>:<kind> kills the process at that journal point;
    used by crash-safety tests."""
    target = os.environ.get("SAL_FAULT")
    if not target:
        return None

    def hook(point: str) -> None:
        if point == target:
            os._exit(3)

    return hook


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.subcommand:
        parser.print_usage(sys.stderr)
        return 2

    line_root = _resolve_line_root(args.line)
    actor = _resolve_actor(args)
    if args.subcommand in _MUTATING_NEEDS_ACTOR and not actor:
        print(
            f"sal {args.subcommand}: an acting owner is required (--as or SAL_OWNER)",
            file=sys.stderr,
        )
        return 2

    invocation = Invocation(args.subcommand, line_root, actor)
    try:
        return _dispatch(invocation, args)
    except CommandFailed as exc:
        # The failing command's own stderr is part of the diagnosis.
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except AssemblyLineError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _open_line(invocation: Invocation) -> AssemblyLine:
    return AssemblyLine(invocation.line_root, fault_hook=_fault_hook_from_env())


def _dispatch(invocation: Invocation, args: argparse.Namespace) -> int:
    command = invocation.subcommand

    if command == "init":
        line = AssemblyLine.init_line(invocation.line_root, fault_hook=_fault_hook_from_env())
        stations = ", ".join(s.id for s in line.topology.stations)
        print(f"initialized line at {line.root} with stations: {stations}")
        return 0

    line = _open_line(invocation)

    if command == "add-package":
        record = line.add_package(args.station, args.package, invocation.actor or "")
        print(f"added package {record.package_id} at {record.station_id}")
        return 0

    if command == "tipo":
        print(render_tipo(line.package_tipo(args.package)))
        return 0

    if command == "build":
        result = line.build(args.package, args.target, invocation.actor or "")
        if result.executed:
            for target in result.executed:
                print(f"built {target}")
        else:
            print("up to date")
        return 0

    if command == "certify":
        cert = line.certify(args.package, invocation.actor)
        print(f"certification of {args.package}: {cert.result}")
        for name, path, digest, origin in cert.tool_manifest:
            print(f"  tool {name} [{origin}] {digest[:12] if digest else '(unresolved)'}")
        return 0 if cert.passed else 1

    if command == "deliver":
        record = line.deliver(
            args.package,
            args.from_station,
            args.to_station,
            args.into_package,
            invocation.actor,
        )
        moved = " ".join(sorted(record.moved)) or "(nothing)"
        print(f"delivered {args.package} -> {args.into_package}: {moved}")
        return 0

    if command == "release":
        record = line.release(args.package, invocation.actor)
        print(f"released {args.package} at {record.station_id}")
        return 0

    if command == "register":
        line.register_artifact(args.artifact, args.provider, args.path, invocation.actor or "")
        print(f"registered {args.artifact}")
        return 0

    if command == "graph":
        document = line.structure_document()
        if args.output:
            Path(args.output).write_text(document)
            print(f"wrote {args.output}")
        else:
            print(document, end="")
        return 0

    if command == "status":
        rows = line.status_rows()
        if not rows:
            print("no packages")
            return 0
        widths = [
            max(len(r[i]) for r in rows + [("STATION", "OWNER", "PACKAGE", "STATE")])
            for i in range(4)
        ]
        header = ("STATION", "OWNER", "PACKAGE", "STATE")
        for row in [header, *rows]:
            print("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        return 0

    if command == "log":
        for event in line.log_events(args.pkg):
            package = event.payload.get("package", event.payload.get("artifact", ""))
            detail = event.payload.get("event") or event.payload.get(
                "outcome", event.payload.get("result", event.payload.get("phase", ""))
            )
            print(f"{event.seq:>4}  {event.timestamp}  {event.actor:<10}  {event.kind:<10} {package} {detail}".rstrip())
        return 0

    if command == "fsck":
        for note in line.fsck(rebuild=args.rebuild):
            print(note)
        return 0

    raise LineConfigError(f"unhandled subcommand {command!r}")


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
