"""Structural invariants of the bundled site families.

Workflow transfer relies on textual hygiene: task binding values must be
replaceable in recorded text without colliding with element labels, page
names, grammar words, or each other.  These tests freeze those guarantees.
"""

from __future__ import annotations

import json
from dataclasses import replace

import pytest

from guardweave import slots
from guardweave.actions import describe, parse_clause
from guardweave.env import Role
from guardweave.model import VariationKind
from guardweave.simweb import SimWeb
from guardweave.sites import (
    _ANSWER_TEMPLATES,
    FAMILY_SITES,
    SITES,
    bundled_families,
    bundled_task_path,
    default_task,
    happy_path,
    load_task,
    task_to_json,
)

FAMILIES = sorted(FAMILY_SITES)

# Literal words used by the canonical action grammar and check phrasing.
GRAMMAR_TEXT = (
    'navigate to | click | type | into | scroll | up | down | select | in | read '
    '| search the web for | answer with | capture the page state '
    '| Before | After | ensure | make sure | overlay | blocking | page | step'
)


def family_sites(family: str):
    return [SITES[s] for s in FAMILY_SITES[family]]


def family_binding_sets(family: str) -> list[dict[str, str]]:
    """Default bindings plus every single-slot swap any axis can produce."""
    task = default_task(family)
    sets = [dict(task.bindings)]
    axes = SITES[task.site].slot_axes
    for slot, axis in axes.items():
        for alt in axis.alternatives:
            if alt != task.bindings[slot]:
                swapped = dict(task.bindings)
                swapped[slot] = alt
                sets.append(swapped)
    return sets


@pytest.mark.parametrize("family", FAMILIES)
def test_skins_share_structure_but_not_form_labels(family: str) -> None:
    a, b = family_sites(family)
    assert [p.name for p in a.pages] == [p.name for p in b.pages]
    assert a.goal == b.goal
    assert a.read_label == b.read_label
    assert {f.slot for f in a.form_fields} == {f.slot for f in b.form_fields}
    # Every form label differs between skins; that is the point of skins.
    labels_a = {f.label for f in a.form_fields}
    labels_b = {f.label for f in b.form_fields}
    assert not labels_a & labels_b
    assert a.submit_label != b.submit_label
    # Mirror labels on non-entry pages are shared, so checks transfer.
    for page_a, page_b in zip(a.pages[1:], b.pages[1:]):
        assert [e.label for e in page_a.elements] == [e.label for e in page_b.elements]


@pytest.mark.parametrize("family", FAMILIES)
def test_axes_cover_all_slots_with_each_variation_kind(family: str) -> None:
    task = default_task(family)
    for site in family_sites(family):
        axes = site.slot_axes
        assert set(axes) == set(task.bindings)
        kinds = [axis.kind for axis in axes.values()]
        assert kinds.count(VariationKind.WEBSITE.value) == 1
        assert kinds.count(VariationKind.CATEGORY.value) == 1
        assert kinds.count(VariationKind.ATTRIBUTE.value) >= 1
        for slot, axis in axes.items():
            assert any(alt != task.bindings[slot] for alt in axis.alternatives), slot
        website_axis = next(a for a in axes.values() if a.kind == VariationKind.WEBSITE.value)
        assert set(website_axis.alternatives) == set(FAMILY_SITES[family])


@pytest.mark.parametrize("family", FAMILIES)
def test_binding_values_never_collide_with_site_text(family: str) -> None:
    sites = family_sites(family)
    protected = [GRAMMAR_TEXT, "Alex Rivera"]
    for site in sites:
        protected.extend(e.label for p in site.pages for e in p.elements)
        protected.extend(p.name for p in site.pages)
        protected.extend(f.overlay_label for f in site.faults if f.overlay_label)
        protected.append(site.submit_label)
    for template in _ANSWER_TEMPLATES.values():
        literal = template
        for slot in slots.find_slots(template):
            literal = literal.replace(f"<{slot}>", "|")
        protected.append(literal)
    for bindings in family_binding_sets(family):
        slots.ordered_replacements(bindings)  # unique, non-empty literals
        values = list(bindings.values())
        for value in values:
            for text in protected:
                assert value not in text, f"{value!r} collides with {text!r}"
        for i, left in enumerate(values):
            for j, right in enumerate(values):
                if i != j:
                    assert left not in right, f"{left!r} is a substring of {right!r}"


@pytest.mark.parametrize("site_id", sorted(SITES))
def test_happy_path_succeeds_without_faults(site_id: str) -> None:
    family = next(fam for fam, ids in FAMILY_SITES.items() if site_id in ids)
    task = default_task(family)
    bindings = dict(task.bindings)
    bindings["website"] = site_id
    site = replace(SITES[site_id], faults=())
    env = SimWeb(site, bindings)
    env.reset(0)
    for command in happy_path(site, bindings):
        outcome = env.apply(command)
        assert outcome.ok, f"{site_id}: {describe(command)} -> {outcome.message}"
    ok, why = env.goal_satisfied()
    assert ok, why


@pytest.mark.parametrize("site_id", sorted(SITES))
def test_happy_path_round_trips_through_action_grammar(site_id: str) -> None:
    family = next(fam for fam, ids in FAMILY_SITES.items() if site_id in ids)
    task = default_task(family)
    bindings = dict(task.bindings)
    bindings["website"] = site_id
    for command in happy_path(SITES[site_id], bindings):
        assert parse_clause(describe(command)) == command


@pytest.mark.parametrize("family", FAMILIES)
def test_variation_swaps_keep_happy_path_valid(family: str) -> None:
    task = default_task(family)
    for bindings in family_binding_sets(family):
        site_id = bindings["website"]
        site = replace(SITES[site_id], faults=())
        env = SimWeb(site, bindings)
        env.reset(0)
        for command in happy_path(site, bindings):
            outcome = env.apply(command)
            assert outcome.ok, f"{site_id} {bindings}: {outcome.message}"
        ok, why = env.goal_satisfied()
        assert ok, f"{site_id} {bindings}: {why}"


@pytest.mark.parametrize("family", FAMILIES)
def test_bundled_task_files_match_registry(family: str) -> None:
    task = load_task(bundled_task_path(family))
    assert task == default_task(family)
    assert task.validate() == []
    rendered = task.rendered()
    assert slots.find_slots(rendered) == []
    assert json.loads(json.dumps(task_to_json(task))) == task_to_json(task)


def test_bundled_families_and_grid_agree() -> None:
    assert bundled_families() == tuple(sorted(FAMILY_SITES))
    from importlib import resources

    grid = json.loads(
        resources.files("guardweave").joinpath("data", "bench", "default_grid.json").read_text("utf-8")
    )
    assert set(grid["families"]) == set(FAMILY_SITES)
    assert set(grid["conditions"]) >= {"guarded", "task_only", "trace_replay", "plan_guided"}
    assert grid["eval_seeds_per_task"] >= 1
    assert grid["explore_runs_per_task"] == 5
