"""Shared error base for the assembly line.

Every domain error derives from AssemblyLineError; the CLI prints the
error class name and message on stderr and exits 1. Module-specific
errors live next to the code that raises them.
"""


class AssemblyLineError(Exception):
    """Base class for all domain errors."""


class FileMissing(AssemblyLineError):
    """A file required by an operation does not exist on disk."""

    def __init__(self, name: str, where: str = ""):
        suffix = f" in {where}" if where else ""
        super().__init__(f"file {name!r} not found{suffix}")
        self.name = name
