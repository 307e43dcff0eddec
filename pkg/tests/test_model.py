"""Workflow model: slot grammar, genericize/bind, validation, diff."""

from __future__ import annotations

import random

import pytest

from guardweave import slots
from guardweave.actions import ActionCommand
from guardweave.model import (
    ConditionCheck,
    FallbackAction,
    FamilyMismatch,
    Origin,
    Phase,
    Predicate,
    StepUnit,
    WorkflowDoc,
    bind,
    diff_workflows,
    doc_slots,
    genericize,
    validate_workflow,
)


def make_doc(*, units: tuple[StepUnit, ...] | None = None, version: int = 1) -> WorkflowDoc:
    if units is None:
        units = (
            StepUnit(
                index=0,
                action_text='type "Paris" into "To"; then click "Search"',
                pre_checks=(
                    ConditionCheck(
                        check_id="chk-pre",
                        phase=Phase.PRE,
                        nl_text='Before clicking "Search", ensure no overlay is blocking the page.',
                        predicate=Predicate.no_overlay(),
                    ),
                ),
                post_checks=(
                    ConditionCheck(
                        check_id="chk-post",
                        phase=Phase.POST,
                        nl_text='After clicking "Search", ensure the results page shows Paris.',
                        predicate=Predicate.text_equals("to-city", "Paris"),
                    ),
                ),
                fallbacks=(
                    FallbackAction(
                        fallback_id="fb-1",
                        rank=1,
                        nl_text='Retry performing click "Search" by click "Dismiss"',
                        commands=(ActionCommand.click("Dismiss"),),
                    ),
                ),
            ),
            StepUnit(index=1, action_text='answer with "Paris trip booked"'),
        )
    return WorkflowDoc(workflow_id="wf-test", family_id="fam-test", version=version, units=units)


# --- slot grammar -----------------------------------------------------------

def test_substitute_and_escape() -> None:
    assert slots.bind_text("go to <city>", {"city": "Paris"}) == "go to Paris"
    assert slots.bind_text("a << b and <x>", {"x": "1 unit"}) == "a < b and 1 unit"
    with pytest.raises(slots.MissingSlot):
        slots.bind_text("go to <city>", {})


def test_slot_names_may_contain_spaces() -> None:
    assert slots.find_slots("fly to <destination city> now") == ["destination city"]
    assert slots.bind_text("<destination city>", {"destination city": "Tokyo"}) == "Tokyo"


def brute_force_single_scan(text: str, replacements: list[tuple[str, str]]) -> str:
    """Oracle: character-wise scan that prefers the longest literal at each
    position and never rescans emitted markers."""
    out = []
    i = 0
    while i < len(text):
        candidates = [(lit, slot) for lit, slot in replacements if text.startswith(lit, i)]
        if candidates:
            lit, slot = max(candidates, key=lambda p: len(p[0]))
            out.append(f"<{slot}>")
            i += len(lit)
        else:
            out.append("<<" if text[i] == "<" else text[i])
            i += 1
    return "".join(out)


def test_genericize_longest_literal_first() -> None:
    bindings = {"a": "New York", "b": "York"}
    reps = slots.ordered_replacements(bindings)
    got = slots.genericize_text("go to New York", reps)
    assert got == "go to <a>"
    assert got == brute_force_single_scan("go to New York", reps)
    # Shorter literal still matched where the longer one is absent.
    assert slots.genericize_text("old York town", reps) == "old <b> town"


def test_genericize_round_trip_randomized() -> None:
    rng = random.Random(7)
    words = ["fly", "to", "Paris", "New York", "York", "on", "2025-05-01", "<", "now", "x<y"]
    for _ in range(200):
        text = " ".join(rng.choice(words) for _ in range(rng.randint(1, 12)))
        bindings = {"a": "New York", "b": "York", "c": "2025-05-01"}
        reps = slots.ordered_replacements(bindings)
        gen = slots.genericize_text(text, reps)
        assert gen == brute_force_single_scan(text, reps)
        assert slots.bind_text(gen, bindings) == text


def test_ambiguous_literal_rejected() -> None:
    with pytest.raises(slots.AmbiguousLiteral):
        slots.ordered_replacements({"a": "Paris", "b": "Paris"})
    with pytest.raises(ValueError):
        slots.ordered_replacements({"a": ""})


# --- document-level genericize/bind ----------------------------------------

def test_doc_genericize_bind_round_trip() -> None:
    doc = make_doc()
    bindings = {"destination city": "Paris"}
    gen = genericize(doc, bindings)
    assert "<destination city>" in gen.units[0].action_text
    assert "Paris" not in gen.units[0].action_text
    # Predicate values and fallback commands are genericized too.
    assert gen.units[0].post_checks[0].predicate.value == "<destination city>"
    assert doc_slots(gen) == ["destination city"]
    again = bind(gen, bindings)
    assert again == doc


def test_doc_bind_missing_slot() -> None:
    gen = genericize(make_doc(), {"destination city": "Paris"})
    with pytest.raises(slots.MissingSlot) as err:
        bind(gen, {"other": "x"})
    assert err.value.slot == "destination city"


def test_bind_rebinds_to_new_values() -> None:
    gen = genericize(make_doc(), {"destination city": "Paris"})
    rebound = bind(gen, {"destination city": "Tokyo"})
    assert 'type "Tokyo" into "To"' in rebound.units[0].action_text
    assert rebound.units[0].post_checks[0].predicate.value == "Tokyo"


# --- validation -------------------------------------------------------------

def test_validate_clean_doc() -> None:
    assert validate_workflow(make_doc()) == []


def test_validate_reports_each_problem_without_raising() -> None:
    bad = make_doc(
        units=(
            StepUnit(
                index=1,  # wrong: first unit must be index 0
                action_text="",
                pre_checks=(
                    ConditionCheck(check_id="c1", phase=Phase.POST, nl_text="x"),
                ),
                fallbacks=(
                    FallbackAction(fallback_id="f1", rank=2, nl_text="retry"),
                ),
            ),
        ),
        version=0,
    )
    violations = validate_workflow(bad)
    fields = {v.field for v in violations}
    assert {"version", "index", "action_text", "pre_checks", "fallbacks"} <= fields
    by_field = {v.field: v for v in violations}
    assert by_field["version"].unit_index is None
    assert by_field["action_text"].unit_index == 0


def test_validate_duplicate_guard_ids() -> None:
    unit = StepUnit(
        index=0,
        action_text="click \"Go\"",
        pre_checks=(
            ConditionCheck(check_id="dup", phase=Phase.PRE, nl_text="a"),
            ConditionCheck(check_id="dup", phase=Phase.PRE, nl_text="b"),
        ),
    )
    violations = validate_workflow(make_doc(units=(unit,)))
    assert any(v.field == "ids" for v in violations)


# --- diff --------------------------------------------------------------------

def test_diff_detects_rank_change_not_add_remove() -> None:
    base = make_doc()
    fb1 = base.units[0].fallbacks[0]
    fb2 = FallbackAction(fallback_id="fb-2", rank=2, nl_text="scroll down", origin=Origin.USER_GUIDANCE)
    import dataclasses

    swapped_units = (
        dataclasses.replace(
            base.units[0],
            fallbacks=(dataclasses.replace(fb2, rank=1), dataclasses.replace(fb1, rank=2)),
        ),
        base.units[1],
    )
    grown = dataclasses.replace(base, version=2, units=(
        dataclasses.replace(base.units[0], fallbacks=(fb1, fb2)),
        base.units[1],
    ))
    moved = dataclasses.replace(base, version=3, units=swapped_units)

    report = diff_workflows(grown, moved)
    entries = report.unit_diffs[0].entries
    # Oracle: the fallback_id sets are equal, so nothing may be added/removed.
    old_ids = {f.fallback_id for f in grown.units[0].fallbacks}
    new_ids = {f.fallback_id for f in moved.units[0].fallbacks}
    assert old_ids == new_ids
    assert all(e.change == "rank" for e in entries)
    assert {(e.item_id, e.old_rank, e.new_rank) for e in entries} == {("fb-1", 1, 2), ("fb-2", 2, 1)}


def test_diff_added_check_carries_origin() -> None:
    import dataclasses

    base = make_doc()
    new_check = ConditionCheck(
        check_id="chk-user", phase=Phase.POST, nl_text="ensure totals match", origin=Origin.USER_GUIDANCE
    )
    grown = dataclasses.replace(
        base,
        version=2,
        units=(
            dataclasses.replace(base.units[0], post_checks=base.units[0].post_checks + (new_check,)),
            base.units[1],
        ),
    )
    report = diff_workflows(base, grown)
    assert not report.empty
    added = [e for e in report.unit_diffs[0].entries if e.change == "added"]
    assert added and added[0].origin is Origin.USER_GUIDANCE


def test_diff_family_mismatch() -> None:
    import dataclasses

    other = dataclasses.replace(make_doc(), family_id="fam-other")
    with pytest.raises(FamilyMismatch):
        diff_workflows(make_doc(), other)


def test_diff_empty_for_identical_docs() -> None:
    assert diff_workflows(make_doc(), make_doc()).empty
