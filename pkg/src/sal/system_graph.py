"""Programming-in-the-large: the coupling graph over a set of packages.

One package's output consumed as another package's input (or tool) is an
edge. The graph gives the system build order and exposes hidden
dependencies: inputs nobody on the line produces.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterable, Mapping

from .errors import AssemblyLineError
from .tipo import TipoList, render_tipo


class AmbiguousProducer(AssemblyLineError):
    """Two packages produce the same consumed artifact; delivery automation
    needs a unique producer to order builds."""

    def __init__(self, artifact: str, producers: Iterable[str]):
        super().__init__(
            f"artifact {artifact!r} is produced by {sorted(producers)} and consumed; "
            "a consumed artifact must have exactly one producer"
        )
        self.artifact = artifact


class CouplingCycle(AssemblyLineError):
    def __init__(self, cycle: list[str], artifacts: Iterable[str]):
        super().__init__(
            "package coupling forms a cycle: "
            + " -> ".join(cycle)
            + f" (via {sorted(set(artifacts))})"
        )
        self.cycle = tuple(cycle)


@dataclass(frozen=True, slots=True)
class CouplingEdge:
    producer: str
    consumer: str
    artifact: str
    kind: str = "input"  # "input" | "tool"


@dataclass(frozen=True, slots=True)
class SystemGraph:
    nodes: tuple[str, ...]
    edges: tuple[CouplingEdge, ...]
    unresolved_inputs: tuple[tuple[str, str], ...]  # (package, input name)


def link_packages(tipos: Mapping[str, TipoList]) -> SystemGraph:
    """Link packages by name: an edge (P, Q, a) exists iff P outputs ``a``
    and Q consumes it. Intermediate outputs are private to their package
    and never match. Inputs with no producer are collected as unresolved.
    """
    producers: dict[str, list[str]] = {}
    for package in sorted(tipos):
        for artifact in tipos[package].deliverable_outputs:
            producers.setdefault(artifact, []).append(package)

    edges: list[CouplingEdge] = []
    unresolved: list[tuple[str, str]] = []
    for consumer in sorted(tipos):
        tipo = tipos[consumer]
        for name in sorted(tipo.inputs):
            owners = producers.get(name, [])
            if len(owners) > 1:
                raise AmbiguousProducer(name, owners)
            if owners:
                if owners[0] != consumer:
                    edges.append(CouplingEdge(owners[0], consumer, name, "input"))
            else:
                unresolved.append((consumer, name))
        for name in sorted(tipo.tools):
            owners = producers.get(name, [])
            if len(owners) > 1:
                raise AmbiguousProducer(name, owners)
            if owners and owners[0] != consumer:
                edges.append(CouplingEdge(owners[0], consumer, name, "tool"))

    return SystemGraph(
        nodes=tuple(sorted(tipos)),
        edges=tuple(sorted(edges, key=lambda e: (e.producer, e.consumer, e.artifact))),
        unresolved_inputs=tuple(sorted(unresolved)),
    )


def build_order(graph: SystemGraph) -> tuple[str, ...]:
    """Topological order of the packages, lexicographic among ties, so a
    whole-system build visits every producer before its consumers."""
    incoming: dict[str, set[str]] = {node: set() for node in graph.nodes}
    outgoing: dict[str, set[str]] = {node: set() for node in graph.nodes}
    for edge in graph.edges:
        incoming[edge.consumer].add(edge.producer)
        outgoing[edge.producer].add(edge.consumer)

    ready = [node for node in graph.nodes if not incoming[node]]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for successor in sorted(outgoing[node]):
            incoming[successor].discard(node)
            if not incoming[successor]:
                heapq.heappush(ready, successor)

    if len(order) != len(graph.nodes):
        stuck = sorted(set(graph.nodes) - set(order))
        cycle = _find_cycle(stuck, outgoing)
        artifacts = [
            e.artifact
            for e in graph.edges
            if e.producer in cycle and e.consumer in cycle
        ]
        raise CouplingCycle(cycle, artifacts)
    return tuple(order)


def _find_cycle(stuck: list[str], outgoing: Mapping[str, set[str]]) -> list[str]:
    remaining = set(stuck)
    start = stuck[0]
    path: list[str] = []
    seen: dict[str, int] = {}
    node = start
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        node = min(s for s in outgoing[node] if s in remaining)
    return path[seen[node] :] + [node]


def report_hidden_dependencies(
    graph: SystemGraph, registry: Mapping[str, object] | Iterable[str]
) -> list[str]:
    """One warning per unresolved input that is not a registered external
    deliverable. Moving software out of private workspaces is what makes
    these visible; registering an artifact acknowledges it as explicit.
    """
    known = set(registry)
    warnings = []
    for package, name in graph.unresolved_inputs:
        if name not in known:
            warnings.append(
                f"{package}: input {name!r} has no producing package and is not registered"
            )
    return warnings


def emit_system_structure(tipos: Mapping[str, TipoList], graph: SystemGraph) -> str:
    """Deterministic document of the whole system: every package's tipo
    block, the coupling edges, unresolved inputs, and a dot rendering."""
    lines = ["SYSTEM STRUCTURE", "================", ""]
    for package in sorted(tipos):
        lines.append(f"package {package}")
        lines.extend("  " + row for row in render_tipo(tipos[package]).splitlines())
        lines.append("")

    lines.append("COUPLING")
    if graph.edges:
        for edge in graph.edges:
            suffix = " (tool)" if edge.kind == "tool" else ""
            lines.append(f"  {edge.producer} -> {edge.consumer} [{edge.artifact}]{suffix}")
    else:
        lines.append("  none")
    lines.append("")

    lines.append("UNRESOLVED INPUTS")
    if graph.unresolved_inputs:
        for package, name in graph.unresolved_inputs:
            lines.append(f"  {package}: {name}")
    else:
        lines.append("  none")
    lines.append("")

    lines.append("digraph system {")
    for node in graph.nodes:
        lines.append(f'  "{node}";')
    for edge in graph.edges:
        style = ' style="dashed"' if edge.kind == "tool" else ""
        lines.append(f'  "{edge.producer}" -> "{edge.consumer}" [label="{edge.artifact}"{style}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
