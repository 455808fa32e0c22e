from __future__ import annotations

import hashlib
import random
from pathlib import Path

import pytest

from sal.build_engine import (
    CommandFailed,
    DependencyCycle,
    Fingerprint,
    MissingIngredient,
    SubprocessRunner,
    UnknownTarget,
    digest_file,
    execute_build,
    fingerprint_tree,
    load_fingerprints,
    plan_build,
)
from sal.errors import FileMissing
from sal.recipe_dsl import parse_recipe

from conftest import stub_transform


def write(root: Path, name: str, data: str) -> Path:
    path = root / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(data)
    return path


# --- fingerprints ---------------------------------------------------------


def test_identical_files_share_a_digest(tmp_path):
    write(tmp_path, "a", "same bytes")
    write(tmp_path, "b", "same bytes")
    prints = {fp.name: fp.digest for fp in fingerprint_tree(tmp_path, ["a", "b"])}
    assert prints["a"] == prints["b"]


def test_single_byte_edit_changes_digest(tmp_path):
    write(tmp_path, "a", "same bytes")
    write(tmp_path, "b", "same bytez")
    prints = {fp.name: fp.digest for fp in fingerprint_tree(tmp_path, ["a", "b"])}
    assert prints["a"] != prints["b"]


def test_empty_name_set(tmp_path):
    assert fingerprint_tree(tmp_path, []) == frozenset()


def test_missing_file(tmp_path):
    with pytest.raises(FileMissing):
        fingerprint_tree(tmp_path, ["ghost"])


# --- planning -------------------------------------------------------------

CHAIN = (
    "prog: mid extra\n\tgen prog mid extra\n"
    "mid: src\n\tgen mid src\n"
)


def test_fresh_workspace_plans_everything_in_dependency_order(tmp_path):
    write(tmp_path, "src", "s")
    write(tmp_path, "extra", "e")
    plan = plan_build(parse_recipe(CHAIN), "prog", {}, tmp_path)
    assert plan.targets == ("mid", "prog")


def test_no_edits_after_build_plans_nothing(tmp_path, stub_runner):
    write(tmp_path, "src", "s")
    write(tmp_path, "extra", "e")
    recipe = parse_recipe(CHAIN)
    plan = plan_build(recipe, "prog", {}, tmp_path)
    execute_build(plan, tmp_path, stub_runner)
    recorded = load_fingerprints(tmp_path)
    assert not plan_build(recipe, "prog", recorded, tmp_path)


def test_editing_a_source_replans_its_consumers(tmp_path, stub_runner):
    write(tmp_path, "src", "s")
    write(tmp_path, "extra", "e")
    recipe = parse_recipe(CHAIN)
    execute_build(plan_build(recipe, "prog", {}, tmp_path), tmp_path, stub_runner)
    write(tmp_path, "src", "s2")
    plan = plan_build(recipe, "prog", load_fingerprints(tmp_path), tmp_path)
    assert plan.targets == ("mid", "prog")


def test_editing_an_unrelated_source_replans_only_its_consumer(tmp_path, stub_runner):
    write(tmp_path, "src", "s")
    write(tmp_path, "extra", "e")
    recipe = parse_recipe(CHAIN)
    execute_build(plan_build(recipe, "prog", {}, tmp_path), tmp_path, stub_runner)
    write(tmp_path, "extra", "e2")
    plan = plan_build(recipe, "prog", load_fingerprints(tmp_path), tmp_path)
    assert plan.targets == ("prog",)


def test_shared_input_edit_replans_both_packages(tmp_path, stub_runner):
    """Two coupled packages: editing the shared input makes the library
    package rebuild its library and the program package rebuild its program."""
    shared = tmp_path / "shared"
    lib_root = tmp_path / "lib"
    app_root = tmp_path / "app"
    for d in (shared, lib_root, app_root):
        d.mkdir()
    write(shared, "iodefs", "defs v1")
    write(lib_root, "subA", "a")
    write(lib_root, "subB", "b")
    write(app_root, "mainC", "c")

    lib_recipe = parse_recipe("libraryAB: iodefs subA subB\n\tgen libraryAB iodefs subA subB\n")
    app_recipe = parse_recipe("programC: iodefs mainC libraryAB\n\tgen programC iodefs mainC libraryAB\n")
    lib_ext = {"iodefs": shared / "iodefs"}

    execute_build(plan_build(lib_recipe, "libraryAB", {}, lib_root, lib_ext), lib_root, stub_runner, lib_ext)
    app_ext = {"iodefs": shared / "iodefs", "libraryAB": lib_root / "libraryAB"}
    execute_build(plan_build(app_recipe, "programC", {}, app_root, app_ext), app_root, stub_runner, app_ext)

    # Both packages are clean.
    assert not plan_build(lib_recipe, "libraryAB", load_fingerprints(lib_root), lib_root, lib_ext)
    assert not plan_build(app_recipe, "programC", load_fingerprints(app_root), app_root, app_ext)

    write(shared, "iodefs", "defs v2")
    lib_plan = plan_build(lib_recipe, "libraryAB", load_fingerprints(lib_root), lib_root, lib_ext)
    app_plan = plan_build(app_recipe, "programC", load_fingerprints(app_root), app_root, app_ext)
    assert lib_plan.targets == ("libraryAB",)
    assert app_plan.targets == ("programC",)


def test_unknown_target(tmp_path):
    with pytest.raises(UnknownTarget):
        plan_build(parse_recipe("a: b\n\tok\n"), "nope", {}, tmp_path)


def test_dependency_cycle_names_the_cycle(tmp_path):
    text = "a: b\n\tok\nb: a\n\tok\n"
    with pytest.raises(DependencyCycle) as excinfo:
        plan_build(parse_recipe(text), "a", {}, tmp_path)
    assert set(excinfo.value.cycle) >= {"a", "b"}


def test_missing_ingredient(tmp_path):
    with pytest.raises(MissingIngredient):
        plan_build(parse_recipe("a: ghost\n\tgen a ghost\n"), "a", {}, tmp_path)


def test_plan_is_deterministic(tmp_path):
    write(tmp_path, "src", "s")
    write(tmp_path, "extra", "e")
    recipe = parse_recipe(CHAIN)
    first = plan_build(recipe, "prog", {}, tmp_path)
    second = plan_build(recipe, "prog", {}, tmp_path)
    assert first == second


# --- execution ------------------------------------------------------------


def test_stub_compiler_produces_expected_digest(tmp_path, stub_bin):
    main_bytes = b"int main() { return 0; }\n"
    write(tmp_path, "mainA", main_bytes.decode())
    recipe = parse_recipe("programA: mainA\n\tcc mainA -o programA\n")
    runner = SubprocessRunner(extra_path=[stub_bin])
    result = execute_build(plan_build(recipe, "programA", {}, tmp_path), tmp_path, runner)

    expected = hashlib.sha256(stub_transform(main_bytes)).hexdigest()
    produced = {fp.name: fp.digest for fp in result.new_fingerprints}
    assert produced["programA"] == expected
    assert digest_file(tmp_path / "programA") == expected


def test_empty_plan_executes_nothing(tmp_path, stub_runner):
    plan = plan_build(parse_recipe("a: \n\tgen a\n"), "a", {}, tmp_path)
    write(tmp_path, "a", "prebuilt")
    empty = plan_build(parse_recipe("a: \n\tgen a\n"), "a", {"a": digest_file(tmp_path / "a")}, tmp_path)
    # Rebuild the plan against the now-complete workspace: nothing is stale.
    assert plan.targets == ("a",)
    result = execute_build(empty, tmp_path, stub_runner)
    assert result.status == "success"
    assert result.executed == ()


def test_failing_first_command_records_nothing(tmp_path, stub_runner):
    write(tmp_path, "src", "s")
    recipe = parse_recipe("out: src\n\tfail\n\tgen out src\n")
    with pytest.raises(CommandFailed) as excinfo:
        execute_build(plan_build(recipe, "out", {}, tmp_path), tmp_path, stub_runner)
    err = excinfo.value
    assert err.exit_code == 1
    assert err.result.executed == ()
    assert err.result.new_fingerprints == frozenset()
    assert load_fingerprints(tmp_path) == {}


def test_build_stops_at_first_failure(tmp_path, stub_runner):
    write(tmp_path, "src", "s")
    recipe = parse_recipe("top: mid\n\tgen top mid\nmid: src\n\tgen mid src\n\tfail\n")
    with pytest.raises(CommandFailed) as excinfo:
        execute_build(plan_build(recipe, "top", {}, tmp_path), tmp_path, stub_runner)
    assert excinfo.value.target == "mid"
    assert not (tmp_path / "top").exists()
    # mid's gen ran before the failure; the file exists but nothing is recorded.
    assert (tmp_path / "mid").exists()
    assert load_fingerprints(tmp_path) == {}


def test_tool_files_are_not_transformed_by_a_build(tmp_path, stub_bin):
    write(tmp_path, "mainA", "body\n")
    before = digest_file(stub_bin / "cc")
    recipe = parse_recipe("programA: mainA\n\tcc mainA -o programA\n")
    execute_build(plan_build(recipe, "programA", {}, tmp_path), tmp_path, SubprocessRunner([stub_bin]))
    assert digest_file(stub_bin / "cc") == before


def test_materialized_inputs_are_copied_and_ledgered(tmp_path, stub_runner):
    elsewhere = tmp_path / "elsewhere"
    ws = tmp_path / "ws"
    elsewhere.mkdir()
    ws.mkdir()
    write(elsewhere, "iodefs", "shared defs")
    write(ws, "mainA", "m")
    recipe = parse_recipe("programA: iodefs mainA\n\tgen programA iodefs mainA\n")
    ext = {"iodefs": elsewhere / "iodefs"}
    execute_build(plan_build(recipe, "programA", {}, ws, ext), ws, stub_runner, ext)
    assert (ws / "iodefs").read_text() == "shared defs"
    from sal.tipo import read_materialized

    assert read_materialized(ws) == frozenset({"iodefs"})


# --- randomized minimality against a brute-force oracle --------------------


def oracle_stale_targets(recipe, goal, recorded, workspace, external=None):
    """Independent staleness computation: fixpoint iteration over the
    reachable rules, straight from the definition."""
    external = external or {}
    rule_for = {r.target: r for r in recipe.rules}

    reachable = {goal}
    while True:
        grown = set(reachable)
        for t in reachable:
            for c in rule_for[t].components:
                if c in rule_for:
                    grown.add(c)
        if grown == reachable:
            break
        reachable = grown

    def current(name):
        if name in external:
            return digest_file(Path(external[name]))
        path = workspace / name
        return digest_file(path) if path.is_file() else None

    def own_stale(t):
        if not (workspace / t).is_file():
            return True
        return any(current(c) != recorded.get(c) for c in rule_for[t].components)

    stale = set()
    while True:
        added = False
        for t in reachable:
            if t in stale:
                continue
            if own_stale(t) or any(c in stale for c in rule_for[t].components):
                stale.add(t)
                added = True
        if not added:
            return stale


def random_recipe(rng):
    sources = [f"s{i}" for i in range(rng.randint(1, 3))]
    n_rules = rng.randint(1, 6)
    lines = []
    targets = []
    for i in range(n_rules):
        target = f"t{i}"
        candidates = sources + targets
        comps = rng.sample(candidates, k=rng.randint(1, min(3, len(candidates))))
        lines.append(f"{target}: {' '.join(comps)}")
        lines.append(f"\tgen {target} {' '.join(comps)}")
        targets.append(target)
    return parse_recipe("\n".join(lines) + "\n"), sources, targets


def test_randomized_plans_match_oracle(tmp_path, stub_runner):
    rng = random.Random(106)
    for round_no in range(40):
        ws = tmp_path / f"ws{round_no}"
        ws.mkdir()
        recipe, sources, targets = random_recipe(rng)
        for s in sources:
            write(ws, s, f"{s} v0")
        for step in range(6):
            goal = rng.choice(targets)
            recorded = load_fingerprints(ws)
            plan = plan_build(recipe, goal, recorded, ws)
            expected = oracle_stale_targets(recipe, goal, recorded, ws)
            assert set(plan.targets) == expected, (round_no, step, goal)
            # Entries respect dependency order.
            seen = set()
            for entry in plan.entries:
                for comp in entry.components:
                    if comp in set(plan.targets):
                        assert comp in seen
                seen.add(entry.target)
            execute_build(plan, ws, stub_runner)
            assert not plan_build(recipe, goal, load_fingerprints(ws), ws)
            # Random edit before the next round.
            op = rng.random()
            if op < 0.5:
                s = rng.choice(sources)
                write(ws, s, f"{s} v{rng.randint(0, 5)}")
            elif op < 0.7:
                victim = ws / rng.choice(targets)
                if victim.exists():
                    victim.unlink()
            # else: no edit at all
