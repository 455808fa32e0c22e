from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sal.recipe_dsl import Rule, parse_recipe
from sal.tipo import (
    ClassConflict,
    IngredientClass,
    NoOutput,
    PackageManifest,
    TipoList,
    extract_tipo,
    render_tipo,
)

COMPILE_RECIPE = "programA: iodefs mainA\n\tcc mainA -o programA\n"


def manifest(*names):
    return PackageManifest("pkg", frozenset(names) | {"recipe.mk"})


def test_single_rule_classification():
    tipo = extract_tipo(parse_recipe(COMPILE_RECIPE), manifest("mainA"))
    assert tipo.tools == frozenset({"cc"})
    assert tipo.inputs == frozenset({"iodefs"})
    assert tipo.primaries == frozenset({"mainA", "recipe.mk"})
    assert tipo.outputs == frozenset({"programA"})
    assert tipo.intermediates == frozenset()


def test_library_consumer_classification():
    text = "programC: iodefs mainC libraryAB\n\tcc mainC libraryAB -o programC\n"
    tipo = extract_tipo(parse_recipe(text), manifest("mainC"))
    assert tipo.inputs == frozenset({"iodefs", "libraryAB"})
    assert tipo.primaries == frozenset({"mainC", "recipe.mk"})
    assert tipo.outputs == frozenset({"programC"})
    assert tipo.tools == frozenset({"cc"})


def test_empty_recipe_has_no_output():
    with pytest.raises(NoOutput):
        extract_tipo(parse_recipe(""), manifest())


def test_render_block():
    tipo = extract_tipo(parse_recipe(COMPILE_RECIPE), manifest("mainA"))
    assert render_tipo(tipo) == (
        "TOOL = cc\n"
        "INPUT = iodefs\n"
        "PRIMARY = mainA recipe.mk\n"
        "OUTPUT = programA"
    )


def test_render_empty_class_has_nothing_after_equals():
    tipo = TipoList(
        tools=frozenset(),
        inputs=frozenset(),
        primaries=frozenset({"recipe.mk"}),
        outputs=frozenset({"out"}),
    )
    lines = render_tipo(tipo).splitlines()
    assert lines[0] == "TOOL ="
    assert lines[1] == "INPUT ="


def test_render_sorts_names():
    tipo = TipoList(
        tools=frozenset({"ld", "cc"}),
        inputs=frozenset(),
        primaries=frozenset({"recipe.mk"}),
        outputs=frozenset({"out"}),
    )
    assert render_tipo(tipo).splitlines()[0] == "TOOL = cc ld"


def test_shell_builtins_are_not_tools():
    text = "out: src\n\tcp src out\n\ttouch out\n"
    tipo = extract_tipo(parse_recipe(text), manifest("src"))
    assert tipo.tools == frozenset()


def test_declared_tool_never_used_as_first_token():
    text = "tool: lint\nout: src\n\tcc src -o out\n"
    tipo = extract_tipo(parse_recipe(text), manifest("src"))
    assert tipo.tools == frozenset({"cc", "lint"})


def test_declared_tool_that_is_a_component_conflicts():
    text = "tool: src\nout: src\n\tcc src -o out\n"
    with pytest.raises(ClassConflict):
        extract_tipo(parse_recipe(text), manifest("src"))


def test_first_token_that_is_a_component_is_not_a_tool():
    # A generator script listed as a component stays a primary.
    text = "out: gen.sh\n\tgen.sh out\n"
    tipo = extract_tipo(parse_recipe(text), manifest("gen.sh"))
    assert tipo.tools == frozenset()
    assert tipo.primaries == frozenset({"gen.sh", "recipe.mk"})


def test_intermediate_targets_stay_outputs_but_are_flagged():
    text = (
        "final: mid\n\tcc mid -o final\n"
        "mid: src\n\tcc src -o mid\n"
    )
    tipo = extract_tipo(parse_recipe(text), manifest("src"))
    assert tipo.outputs == frozenset({"final", "mid"})
    assert tipo.intermediates == frozenset({"mid"})
    assert tipo.deliverable_outputs == frozenset({"final"})


def test_recipe_file_cannot_be_a_target():
    with pytest.raises(ClassConflict):
        extract_tipo(parse_recipe("recipe.mk: x\n\tcc x\n"), manifest("x"))


def test_test_rule_is_not_a_product():
    text = (
        "programA: mainA\n\tcc mainA -o programA\n"
        "test: programA golden.dat\n\tcheck programA golden.dat\n"
    )
    tipo = extract_tipo(parse_recipe(text), manifest("mainA", "golden.dat"))
    # The test target is no output, and the output it consumes stays deliverable.
    assert tipo.outputs == frozenset({"programA"})
    assert tipo.intermediates == frozenset()
    assert tipo.deliverable_outputs == frozenset({"programA"})
    # Test data and test tools are ordinary ingredients.
    assert "golden.dat" in tipo.primaries
    assert "check" in tipo.tools


def test_recipe_with_only_a_test_rule_has_no_output():
    with pytest.raises(NoOutput):
        extract_tipo(parse_recipe("test: x\n\tcheck x\n"), manifest("x"))


def test_locality_flip():
    with_local = extract_tipo(parse_recipe(COMPILE_RECIPE), manifest("mainA", "iodefs"))
    without = extract_tipo(parse_recipe(COMPILE_RECIPE), manifest("mainA"))
    assert "iodefs" in with_local.primaries and "iodefs" in without.inputs
    assert with_local.tools == without.tools
    assert with_local.outputs == without.outputs
    assert with_local.primaries - {"iodefs"} == without.primaries


def test_classify_lookup():
    tipo = extract_tipo(parse_recipe(COMPILE_RECIPE), manifest("mainA"))
    assert tipo.classify("cc") is IngredientClass.TOOL
    assert tipo.classify("iodefs") is IngredientClass.INPUT
    assert tipo.classify("mainA") is IngredientClass.PRIMARY
    assert tipo.classify("programA") is IngredientClass.OUTPUT
    assert tipo.classify("unknown") is None


def test_tipolist_rejects_overlap():
    with pytest.raises(ValueError):
        TipoList(
            tools=frozenset({"x"}),
            inputs=frozenset({"x"}),
            primaries=frozenset(),
            outputs=frozenset({"out"}),
        )


_name = st.from_regex(r"[a-z][a-z0-9]{0,5}", fullmatch=True)


@st.composite
def recipe_and_manifest(draw):
    targets = draw(st.lists(_name, min_size=1, max_size=4, unique=True).filter(
        lambda ts: "recipe.mk" not in ts
    ))
    pool = draw(st.lists(_name, min_size=1, max_size=6, unique=True))
    rules = []
    for target in targets:
        components = tuple(draw(st.lists(st.sampled_from(pool + targets), max_size=3, unique=True)))
        commands = tuple(
            f"{tool} {' '.join(components)}".strip()
            for tool in draw(st.lists(_name, max_size=2))
        )
        rules.append(Rule(target, components, commands))
    local = frozenset(draw(st.lists(st.sampled_from(pool), max_size=4))) | {"recipe.mk"}
    from sal.recipe_dsl import Recipe

    return Recipe(tuple(rules)), PackageManifest("p", local)


@settings(max_examples=200)
@given(recipe_and_manifest())
def test_classification_is_total_and_disjoint(pair):
    recipe, man = pair
    tipo = extract_tipo(recipe, man)
    # Disjointness across classes.
    assert not tipo.tools & (tipo.inputs | tipo.primaries | tipo.outputs)
    assert not tipo.inputs & tipo.primaries
    # Every component of every rule is classified exactly once.
    for rule in recipe.rules:
        for comp in rule.components:
            assert tipo.classify(comp) is not None
    # Determinism.
    assert extract_tipo(recipe, man) == tipo
