"""Ingredient classification: every file a recipe names falls into exactly
one of four classes.

    OUTPUT   a rule target; outputs are always targets
    PRIMARY  a component that is local to the package (plus the recipe file)
    INPUT    a component that comes from outside the package
    TOOL     a command's first token, or an explicitly declared tool name,
             that is not otherwise classified

The four sets of a package, rendered as its tipo list, are the package's
interconnection signature: inputs couple packages together, primaries are
what deliveries move, tools are what certification pins.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

from .errors import AssemblyLineError, FileMissing
from .recipe_dsl import RECIPE_FILENAME, TEST_TARGET, Recipe

# First tokens with no certifiable identity; never classified as tools.
SHELL_BUILTINS = frozenset({"cd", "echo", "rm", "cp", "mkdir", "touch"})


class IngredientClass(enum.Enum):
    TOOL = "TOOL"
    INPUT = "INPUT"
    PRIMARY = "PRIMARY"
    OUTPUT = "OUTPUT"


class NoOutput(AssemblyLineError):
    """The recipe has no rules, so the package cannot produce an output."""


class ClassConflict(AssemblyLineError):
    """A name was forced into two ingredient classes at once."""


@dataclass(frozen=True, slots=True)
class PackageManifest:
    """The files physically owned by a package at its root.

    Files the build engine materialized from other packages are not
    local, they are cached copies of inputs; `from_workspace` excludes
    them so classification is stable across builds.
    """

    package_id: str
    local_files: frozenset[str]

    @classmethod
    def from_workspace(cls, package_id: str, root: Path) -> "PackageManifest":
        if not (root / RECIPE_FILENAME).is_file():
            raise FileMissing(RECIPE_FILENAME, str(root))
        materialized = read_materialized(root)
        names = set()
        for path in root.rglob("*"):
            if not path.is_file():
                continue
            rel = path.relative_to(root).as_posix()
            if rel.startswith(".sal/") or rel in materialized:
                continue
            names.add(rel)
        return cls(package_id, frozenset(names))


def read_materialized(root: Path) -> frozenset[str]:
    """Names of input files the build engine copied into this workspace."""
    ledger = root / ".sal" / "materialized"
    if not ledger.is_file():
        return frozenset()
    return frozenset(line.strip() for line in ledger.read_text().splitlines() if line.strip())


@dataclass(frozen=True, slots=True)
class TipoList:
    """The tool/input/primary/output classification of one package."""

    tools: frozenset[str]
    inputs: frozenset[str]
    primaries: frozenset[str]
    outputs: frozenset[str]
    intermediates: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if not self.outputs:
            raise ValueError("a package must have at least one output")
        if not self.intermediates <= self.outputs:
            raise ValueError("intermediates must be a subset of outputs")
        groups = [self.tools, self.inputs, self.primaries, self.outputs]
        for i, a in enumerate(groups):
            for b in groups[i + 1 :]:
                common = a & b
                if common:
                    raise ValueError(f"ingredient classes overlap on {sorted(common)}")

    @property
    def deliverable_outputs(self) -> frozenset[str]:
        """Outputs visible to other packages (intermediates are not)."""
        return self.outputs - self.intermediates

    def classify(self, name: str) -> IngredientClass | None:
        if name in self.outputs:
            return IngredientClass.OUTPUT
        if name in self.primaries:
            return IngredientClass.PRIMARY
        if name in self.inputs:
            return IngredientClass.INPUT
        if name in self.tools:
            return IngredientClass.TOOL
        return None


def extract_tipo(recipe: Recipe, manifest: PackageManifest) -> TipoList:
    """Classify every file named by the recipe.

    The recipe must already be macro-expanded. Targets are outputs;
    non-target components are primaries when local to the package and
    inputs otherwise; command first tokens and declared names that are
    not targets or components are tools. The recipe file itself is a
    primary: it is the package's construction procedure.

    The ``test`` rule is the certification procedure, not a product: its
    target is no output, and outputs it consumes stay deliverable (they
    are not intermediates). Its test data and tools classify normally.
    """
    product_rules = [rule for rule in recipe.rules if rule.target != TEST_TARGET]
    if not product_rules:
        raise NoOutput(
            f"recipe of package {manifest.package_id!r} has no rules that produce an output"
        )

    targets = {rule.target for rule in product_rules}
    if RECIPE_FILENAME in targets:
        raise ClassConflict(f"{RECIPE_FILENAME} is the recipe itself and cannot be a target")

    components: set[str] = set()
    for rule in recipe.rules:
        components.update(rule.components)

    inputs: set[str] = set()
    primaries: set[str] = {RECIPE_FILENAME}
    for comp in components:
        if comp in targets:
            continue
        if comp in manifest.local_files:
            primaries.add(comp)
        else:
            inputs.add(comp)

    detected = {rule_cmd.split()[0] for rule in recipe.rules for rule_cmd in rule.commands}
    detected -= SHELL_BUILTINS

    conflict = recipe.declared_tools & (components | {RECIPE_FILENAME})
    if conflict:
        raise ClassConflict(f"declared tools {sorted(conflict)} are also components")

    tools = (detected | recipe.declared_tools) - targets - components - {RECIPE_FILENAME}

    product_components: set[str] = set()
    for rule in product_rules:
        product_components.update(rule.components)
    intermediates = targets & product_components

    return TipoList(
        tools=frozenset(tools),
        inputs=frozenset(inputs),
        primaries=frozenset(primaries),
        outputs=frozenset(targets),
        intermediates=frozenset(intermediates),
    )


def render_tipo(tipo: TipoList) -> str:
    """Render the four-line tipo block, names sorted within each line.

    This format is a stable contract: system structure documents and the
    CLI ``tipo`` command emit it byte for byte.
    """
    lines = []
    for label, names in (
        ("TOOL", tipo.tools),
        ("INPUT", tipo.inputs),
        ("PRIMARY", tipo.primaries),
        ("OUTPUT", tipo.outputs),
    ):
        joined = " ".join(sorted(names))
        lines.append(f"{label} = {joined}" if joined else f"{label} =")
    return "\n".join(lines)
