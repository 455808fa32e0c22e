"""Deliveries: the controlled copy of a package's primaries to the next
station.

A delivery is pull-style: the owner of the destination station requests
it, and only for a package certified at the source. Only primary elements
move, never inputs, tools, or outputs. The source is left untouched and
every copied byte is verified by digest. Responsibility for the delivered
material transfers to the destination's owner only after the destination
package passes certification.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

from .build_engine import digest_file
from .errors import AssemblyLineError
from .line_model import CertificationRecord, LineTopology, PackageRecord, PackageState
from .recipe_dsl import RECIPE_FILENAME
from .tipo import TipoList


class NotCertified(AssemblyLineError):
    def __init__(self, package_id: str, state: str):
        super().__init__(
            f"package {package_id!r} is {state}; only a certified package can be delivered"
        )


class NotOwner(AssemblyLineError):
    def __init__(self, actor: str, station_id: str, owner: str):
        super().__init__(
            f"{actor!r} is not the owner of station {station_id!r} (owned by {owner!r})"
        )


class NoSuchEdge(AssemblyLineError):
    def __init__(self, from_id: str, to_id: str):
        super().__init__(f"the line has no delivery edge {from_id!r} -> {to_id!r}")


class WrongStation(AssemblyLineError):
    pass


class DigestMismatch(AssemblyLineError):
    pass


class DestinationMissing(AssemblyLineError):
    def __init__(self, package_id: str, detail: str):
        super().__init__(f"destination package {package_id!r} is not usable: {detail}")


class DeliveryCollision(AssemblyLineError):
    def __init__(self, name: str, detail: str):
        super().__init__(f"file {name!r} already exists at the destination ({detail})")
        self.name = name


class CertificationFailed(AssemblyLineError):
    pass


@dataclass(frozen=True, slots=True)
class DeliveryTicket:
    """An authorized delivery, created by the destination station's owner."""

    package_id: str
    from_station: str
    to_station: str
    requested_by: str
    created: str
    ticket_id: int = 0  # journal sequence number once recorded


@dataclass(frozen=True)
class DeliveryRecord:
    ticket: DeliveryTicket
    destination_package: str
    moved: dict[str, str]  # file name -> digest
    responsibility: str = "pending"  # "pending" | "transferred"

    def to_dict(self) -> dict:
        return {
            "ticket_id": self.ticket.ticket_id,
            "package": self.ticket.package_id,
            "from": self.ticket.from_station,
            "to": self.ticket.to_station,
            "requested_by": self.ticket.requested_by,
            "created": self.ticket.created,
            "destination": self.destination_package,
            "moved": dict(sorted(self.moved.items())),
            "responsibility": self.responsibility,
        }


def request_delivery(
    record: PackageRecord,
    from_station: str,
    to_station: str,
    actor: str,
    *,
    topology: LineTopology,
    created: str,
) -> DeliveryTicket:
    """Validate and create a delivery ticket.

    Gates, in order: the edge must exist on the line, the package must sit
    at the source station in state Certified, and the actor must own the
    destination station.
    """
    to = topology.station(to_station)
    if not topology.has_edge(from_station, to_station):
        raise NoSuchEdge(from_station, to_station)
    if record.station_id != from_station:
        raise WrongStation(
            f"package {record.package_id!r} is at station {record.station_id!r}, "
            f"not {from_station!r}"
        )
    if record.state is not PackageState.CERTIFIED:
        raise NotCertified(record.package_id, record.state.value)
    if actor != to.owner:
        raise NotOwner(actor, to_station, to.owner)
    return DeliveryTicket(record.package_id, from_station, to_station, actor, created)


def moved_names(source_tipo: TipoList, destination_components: frozenset[str]) -> tuple[str, ...]:
    """The file names a delivery moves: every source primary, with the
    source recipe included only when the destination recipe lists it as a
    component (the destination's own recipe governs the integrated build).
    """
    names = set(source_tipo.primaries)
    if RECIPE_FILENAME not in destination_components:
        names.discard(RECIPE_FILENAME)
    return tuple(sorted(names))


def execute_delivery(
    ticket: DeliveryTicket,
    destination_package: str,
    *,
    source_root: Path,
    destination_root: Path,
    source_tipo: TipoList,
    certified_manifest: Mapping[str, str],
    destination_components: frozenset[str],
    prior_claims: Mapping[str, str],
) -> DeliveryRecord:
    """Copy the source package's primaries byte-identically into the
    destination package root.

    ``certified_manifest`` is the digest snapshot taken when the source
    was certified; if any primary has drifted the certification is void
    and the delivery refuses to run. ``prior_claims`` maps destination
    file names to the source package that delivered them earlier; a name
    claimed by a different source, or present without any claim, is a
    packaging mistake and a hard error. Re-delivering the same package is
    idempotent.
    """
    if not destination_root.is_dir():
        raise DestinationMissing(destination_package, f"no directory {destination_root}")
    if not (destination_root / RECIPE_FILENAME).is_file():
        raise DestinationMissing(destination_package, f"no {RECIPE_FILENAME} at {destination_root}")

    names = moved_names(source_tipo, destination_components)

    # Verify the source still matches its certification snapshot.
    for name in names:
        source = source_root / name
        if not source.is_file():
            raise DigestMismatch(
                f"certified primary {name!r} is missing from {ticket.package_id!r}"
            )
        digest = digest_file(source)
        recorded = certified_manifest.get(name)
        if recorded is None or digest != recorded:
            raise DigestMismatch(
                f"primary {name!r} of {ticket.package_id!r} changed since certification; "
                "the certification is void"
            )

    # Check for collisions before touching anything.
    for name in names:
        dest = destination_root / name
        if not dest.exists():
            continue
        claimant = prior_claims.get(name)
        if name == RECIPE_FILENAME:
            # Listed as a component by the destination recipe: the
            # destination opted in to taking the source's recipe.
            continue
        if claimant is None:
            raise DeliveryCollision(name, f"it belongs to package {destination_package!r}")
        if claimant != ticket.package_id:
            raise DeliveryCollision(name, f"it was delivered by package {claimant!r}")

    moved: dict[str, str] = {}
    for name in names:
        source = source_root / name
        dest = destination_root / name
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(source, dest)
        shutil.copymode(source, dest)
        copied = digest_file(dest)
        if copied != digest_file(source):
            raise DigestMismatch(f"copy of {name!r} does not match its source")
        moved[name] = copied

    return DeliveryRecord(ticket, destination_package, moved, "pending")


def transfer_responsibility(
    record: DeliveryRecord,
    certification: CertificationRecord,
    *,
    new_owner: str,
) -> DeliveryRecord:
    """Mark the delivered material as the destination owner's, which is
    allowed only after a pass certification at the destination station."""
    if certification.package_id != record.destination_package:
        raise ValueError(
            f"certification covers {certification.package_id!r}, "
            f"not {record.destination_package!r}"
        )
    if certification.station_id != record.ticket.to_station:
        raise WrongStation(
            f"certification happened at {certification.station_id!r}, "
            f"but the delivery landed at {record.ticket.to_station!r}"
        )
    if not certification.passed:
        raise CertificationFailed(
            f"certification of {record.destination_package!r} failed; "
            "responsibility stays with the source owner"
        )
    return replace(record, responsibility="transferred")
