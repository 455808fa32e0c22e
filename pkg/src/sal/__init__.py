"""sal: a software assembly line.

Packages are built from recipes, their ingredients classified into
tools, inputs, primaries, and outputs, and their certified primaries
delivered along a line of stations toward a releasable product. Every
milestone is journaled and the whole line state replays from the journal.
"""

from .errors import AssemblyLineError
from .line import AssemblyLine

__version__ = "0.1.0"

__all__ = ["AssemblyLine", "AssemblyLineError", "__version__"]
