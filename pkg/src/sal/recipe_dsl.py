"""Parser for the recipe language that describes how a package is built.

A recipe is plain text, a deliberate subset of makefile syntax:

    NAME = value            macro definition (single-pass, non-recursive)
    tool: name1 name2       declares tools that never appear as a command's
                            first token
    target: comp1 comp2     rule header
    <TAB>command line       commands belonging to the preceding rule header

Comment lines (leading ``#``) and blank lines are ignored. Commands must
be tab-indented. Unlike make, duplicate targets are an error: a package
has exactly one construction path per output.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

from .errors import AssemblyLineError

RECIPE_FILENAME = "recipe.mk"

# Certification convention: the rule with this target holds the package's
# test commands. It describes a procedure, not a product.
TEST_TARGET = "test"

# "tool" is a directive, never a rule target.
_TOOL_DIRECTIVE = "tool"

_MACRO_DEF = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=(.*)$")
_MACRO_REF = re.compile(r"\$\(([A-Za-z_][A-Za-z0-9_]*)\)")
_MACRO_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class RecipeSyntaxError(AssemblyLineError):
    """Recipe text violates the grammar; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UndefinedMacro(AssemblyLineError):
    """A $(NAME) reference has no macro definition."""

    def __init__(self, name: str, where: str):
        super().__init__(f"$({name}) in {where!r} is not defined")
        self.name = name


def _check_token(token: str, what: str) -> None:
    if not token:
        raise ValueError(f"{what} must be non-empty")
    if any(c.isspace() for c in token):
        raise ValueError(f"{what} {token!r} must not contain whitespace")


@dataclass(frozen=True, slots=True)
class Rule:
    """One build rule: a target, the components it is made from, and the
    command lines that make it.

    Targets and components are whitespace-free relative file names; a
    target additionally must not contain ``:`` or ``=`` and must not be
    the reserved word ``tool`` (so a rendered rule reparses as a rule).
    Commands are single non-blank lines. A rule may have no commands
    (pure dependency rule) and no components.
    """

    target: str
    components: tuple[str, ...] = ()
    commands: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        _check_token(self.target, "rule target")
        if ":" in self.target or "=" in self.target:
            raise ValueError(f"rule target {self.target!r} must not contain ':' or '='")
        if self.target.startswith("#"):
            raise ValueError("rule target must not start with '#'")
        if self.target == _TOOL_DIRECTIVE:
            raise ValueError(f"{_TOOL_DIRECTIVE!r} is reserved for tool declarations")
        for comp in self.components:
            _check_token(comp, "rule component")
        for cmd in self.commands:
            if not cmd.strip():
                raise ValueError("commands must not be blank")
            if "\n" in cmd or "\r" in cmd:
                raise ValueError("commands must be single lines")


@dataclass(frozen=True)
class Recipe:
    """A parsed recipe: rules in source order, macro definitions, and the
    names declared by ``tool:`` directive lines."""

    rules: tuple[Rule, ...] = ()
    macros: dict[str, str] = field(default_factory=dict)
    declared_tools: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for rule in self.rules:
            if rule.target in seen:
                raise ValueError(f"duplicate rule target {rule.target!r}")
            seen.add(rule.target)
        for name in self.macros:
            if not _MACRO_NAME.match(name or ""):
                raise ValueError(f"invalid macro name {name!r}")
        for name in self.declared_tools:
            _check_token(name, "declared tool")

    @property
    def targets(self) -> tuple[str, ...]:
        return tuple(rule.target for rule in self.rules)

    def rule_for(self, target: str) -> Rule | None:
        for rule in self.rules:
            if rule.target == target:
                return rule
        return None


def parse_recipe(text: str) -> Recipe:
    """Parse recipe source into a Recipe.

    Returns a complete Recipe or raises RecipeSyntaxError with the line
    number of the first problem; it never partially succeeds.
    """
    rules: list[Rule] = []
    seen_targets: dict[str, int] = {}
    macros: dict[str, str] = {}
    declared_tools: set[str] = set()

    # The rule currently collecting commands, as mutable parts.
    open_rule: tuple[str, tuple[str, ...], list[str]] | None = None

    def close_rule() -> None:
        nonlocal open_rule
        if open_rule is not None:
            target, components, commands = open_rule
            rules.append(Rule(target, components, tuple(commands)))
            open_rule = None

    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("\t"):
            if open_rule is None:
                raise RecipeSyntaxError("command line has no preceding rule header", lineno)
            open_rule[2].append(line[1:])
            continue
        if line.lstrip().startswith("#"):
            continue

        macro = _MACRO_DEF.match(line)
        if macro:
            close_rule()
            name, value = macro.group(1), macro.group(2).strip()
            if name in macros:
                raise RecipeSyntaxError(f"duplicate macro definition {name!r}", lineno)
            macros[name] = value
            continue

        if ":" not in line:
            raise RecipeSyntaxError(f"expected ':' in rule header {line.strip()!r}", lineno)
        head, _, rest = line.partition(":")
        target = head.strip()
        names = rest.split()

        if target == _TOOL_DIRECTIVE:
            close_rule()
            declared_tools.update(names)
            continue

        close_rule()
        if not target:
            raise RecipeSyntaxError("rule header has an empty target", lineno)
        if len(target.split()) != 1:
            raise RecipeSyntaxError(f"rule target {target!r} contains whitespace", lineno)
        if target in seen_targets:
            raise RecipeSyntaxError(
                f"duplicate target {target!r} (first defined at line {seen_targets[target]})",
                lineno,
            )
        try:
            Rule(target, tuple(names))
        except ValueError as exc:
            raise RecipeSyntaxError(str(exc), lineno) from None
        seen_targets[target] = lineno
        open_rule = (target, tuple(names), [])

    close_rule()
    return Recipe(tuple(rules), macros, frozenset(declared_tools))


def render_recipe(recipe: Recipe) -> str:
    """Render a Recipe as canonical recipe text.

    ``parse_recipe(render_recipe(r)) == r`` for every valid Recipe.
    """
    lines: list[str] = []
    for name, value in recipe.macros.items():
        lines.append(f"{name} = {value}".rstrip())
    if recipe.declared_tools:
        lines.append(f"{_TOOL_DIRECTIVE}: " + " ".join(sorted(recipe.declared_tools)))
    for rule in recipe.rules:
        header = rule.target + ":"
        if rule.components:
            header += " " + " ".join(rule.components)
        lines.append(header)
        lines.extend("\t" + cmd for cmd in rule.commands)
    return "\n".join(lines) + ("\n" if lines else "")


def _substitute(text: str, macros: dict[str, str], where: str) -> str:
    def repl(match: re.Match[str]) -> str:
        name = match.group(1)
        if name not in macros:
            raise UndefinedMacro(name, where)
        return macros[name]

    return _MACRO_REF.sub(repl, text)


def expand_macros(recipe: Recipe) -> Recipe:
    """Replace every $(NAME) occurrence in targets, components, and
    commands with the macro's value.

    Expansion is a single pass: values substituted into the recipe are
    not scanned again for further references.
    """
    rules = []
    for rule in recipe.rules:
        where = f"rule {rule.target}"
        rules.append(
            replace(
                rule,
                target=_substitute(rule.target, recipe.macros, where),
                components=tuple(_substitute(c, recipe.macros, where) for c in rule.components),
                commands=tuple(_substitute(c, recipe.macros, where) for c in rule.commands),
            )
        )
    return Recipe(tuple(rules), dict(recipe.macros), recipe.declared_tools)
