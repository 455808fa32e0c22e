from __future__ import annotations

import os
import stat
from pathlib import Path

import pytest

from sal.build_engine import CommandResult

# Stub tools used wherever a test needs real subprocess commands. `cc` and
# `combine` concatenate their non-flag arguments into the -o target (and mark
# it executable so built tools can be run); `check` verifies its argument
# exists; `fail` always exits 1.
_STUBS = {
    "cc": """#!/bin/sh
out=""
ins=""
while [ $# -gt 0 ]; do
  case "$1" in
    -o) shift; out="$1";;
    *) ins="$ins $1";;
  esac
  shift
done
if [ -z "$out" ]; then echo "cc: missing -o" >&2; exit 2; fi
cat $ins > "$out" || exit 1
chmod +x "$out"
""",
    "combine": """#!/bin/sh
out=""
ins=""
while [ $# -gt 0 ]; do
  case "$1" in
    -o) shift; out="$1";;
    *) ins="$ins $1";;
  esac
  shift
done
if [ -z "$out" ]; then echo "combine: missing -o" >&2; exit 2; fi
cat $ins > "$out" || exit 1
""",
    "check": """#!/bin/sh
for f in "$@"; do
  test -e "$f" || { echo "check: $f missing" >&2; exit 1; }
done
exit 0
""",
    "fail": """#!/bin/sh
echo "fail: forced failure" >&2
exit 1
""",
}


def write_stub_tools(directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    for name, body in _STUBS.items():
        path = directory / name
        path.write_text(body)
        path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    return directory


@pytest.fixture(scope="session")
def stub_bin(tmp_path_factory) -> Path:
    return write_stub_tools(tmp_path_factory.mktemp("stub-tools"))


def stub_transform(*input_blobs: bytes) -> bytes:
    """What the cc/combine stubs produce for the given input bytes."""
    return b"".join(input_blobs)


class StubRunner:
    """In-process command interpreter; keeps unit tests free of subprocesses.

    gen OUT IN...   writes OUT from its inputs' bytes
    ok              succeeds without touching anything
    fail            exits 1
    """

    def run(self, command: str, workspace: Path) -> CommandResult:
        argv = command.split()
        if argv[0] == "gen":
            out = workspace / argv[1]
            parts = [(workspace / name).read_bytes() for name in argv[2:]]
            out.write_bytes(b"gen(" + b"|".join(parts) + b")")
            return CommandResult(0, "", "")
        if argv[0] == "ok":
            return CommandResult(0, "", "")
        if argv[0] == "fail":
            return CommandResult(1, "", "forced failure")
        return CommandResult(127, "", f"unknown stub command {argv[0]}")


@pytest.fixture
def stub_runner() -> StubRunner:
    return StubRunner()


@pytest.fixture(autouse=True)
def _no_inherited_line_env(monkeypatch):
    for var in ("SAL_LINE", "SAL_OWNER", "SAL_FAULT"):
        monkeypatch.delenv(var, raising=False)
