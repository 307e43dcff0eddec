"""Guarded-workflow data model: tasks, checks, fallbacks, units, documents.

All types are immutable values.  Transformations (genericize, bind, guidance
integration) return new documents; nothing mutates in place.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum

from . import slots
from .actions import ActionCommand

WORKFLOW_SCHEMA = "guardweave.workflow/1"


class Phase(str, Enum):
    PRE = "pre"
    POST = "post"


class Origin(str, Enum):
    SYNTHESIZED = "synthesized"
    USER_GUIDANCE = "user_guidance"


class VariationKind(str, Enum):
    ATTRIBUTE = "attribute"
    CATEGORY = "category"
    WEBSITE = "website"


class PredicateKind(str, Enum):
    EXISTS = "exists"
    NOT_EXISTS = "not_exists"
    TEXT_EQUALS = "text_equals"
    FIELD_VALUE = "field_value"
    URL_CONTAINS = "url_contains"
    NO_OVERLAY = "no_overlay"
    COUNT_AT_LEAST = "count_at_least"


@dataclass(frozen=True)
class Predicate:
    """Machine-checkable page condition; evaluation needs only a snapshot."""

    kind: PredicateKind
    target: str = ""
    value: str = ""
    count: int = 0

    @classmethod
    def exists(cls, target: str) -> Predicate:
        return cls(PredicateKind.EXISTS, target=target)

    @classmethod
    def not_exists(cls, target: str) -> Predicate:
        return cls(PredicateKind.NOT_EXISTS, target=target)

    @classmethod
    def text_equals(cls, target: str, value: str) -> Predicate:
        return cls(PredicateKind.TEXT_EQUALS, target=target, value=value)

    @classmethod
    def field_value(cls, target: str, value: str) -> Predicate:
        return cls(PredicateKind.FIELD_VALUE, target=target, value=value)

    @classmethod
    def url_contains(cls, value: str) -> Predicate:
        return cls(PredicateKind.URL_CONTAINS, value=value)

    @classmethod
    def no_overlay(cls) -> Predicate:
        return cls(PredicateKind.NO_OVERLAY)

    @classmethod
    def count_at_least(cls, target: str, count: int) -> Predicate:
        return cls(PredicateKind.COUNT_AT_LEAST, target=target, count=count)

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind.value}
        if self.target:
            out["target"] = self.target
        if self.value:
            out["value"] = self.value
        if self.count:
            out["count"] = self.count
        return out

    @classmethod
    def from_json(cls, data: dict) -> Predicate:
        return cls(
            PredicateKind(data["kind"]),
            target=data.get("target", ""),
            value=data.get("value", ""),
            count=int(data.get("count", 0)),
        )


@dataclass(frozen=True)
class ConditionCheck:
    """A pre- or post-condition attached to a step."""

    check_id: str
    phase: Phase
    nl_text: str
    predicate: Predicate | None = None
    origin: Origin = Origin.SYNTHESIZED
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FallbackAction:
    """A ranked recovery instruction tried when a step's attempt fails."""

    fallback_id: str
    rank: int
    nl_text: str
    commands: tuple[ActionCommand, ...] = ()
    origin: Origin = Origin.SYNTHESIZED
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StepUnit:
    """One plan step with its guards: action + checks + fallbacks."""

    index: int
    action_text: str
    pre_checks: tuple[ConditionCheck, ...] = ()
    post_checks: tuple[ConditionCheck, ...] = ()
    fallbacks: tuple[FallbackAction, ...] = ()
    extra: dict = field(default_factory=dict)

    def checks(self) -> tuple[ConditionCheck, ...]:
        return self.pre_checks + self.post_checks


@dataclass(frozen=True)
class Provenance:
    run_ids: tuple[str, ...] = ()
    guidance_note_ids: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {"run_ids": list(self.run_ids), "guidance_note_ids": list(self.guidance_note_ids)}

    @classmethod
    def from_json(cls, data: dict) -> Provenance:
        return cls(
            run_ids=tuple(data.get("run_ids", ())),
            guidance_note_ids=tuple(data.get("guidance_note_ids", ())),
        )


@dataclass(frozen=True)
class WorkflowDoc:
    """A versioned, guard-annotated workflow for one task family."""

    workflow_id: str
    family_id: str
    version: int
    units: tuple[StepUnit, ...]
    provenance: Provenance = field(default_factory=Provenance)
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TaskSpec:
    """A parameterized task: template text plus slot bindings on a site."""

    family_id: str
    template: str
    bindings: dict[str, str]
    site: str
    unbound: tuple[str, ...] = ()

    def rendered(self) -> str:
        return slots.substitute(self.template, self.bindings, partial=True)

    def slot_names(self) -> list[str]:
        return slots.find_slots(self.template)

    def validate(self) -> list[str]:
        """Return problems (empty when well-formed)."""
        problems = []
        names = set(self.slot_names())
        for name in names:
            if name not in self.bindings and name not in self.unbound:
                problems.append(f"slot <{name}> is neither bound nor declared unbound")
        for name in self.bindings:
            if name not in names:
                problems.append(f"binding <{name}> does not appear in the template")
        if not self.site:
            problems.append("task has no site")
        return problems

    def to_json(self) -> dict:
        data = {
            "family_id": self.family_id,
            "template": self.template,
            "bindings": dict(self.bindings),
            "site": self.site,
        }
        if self.unbound:
            data["unbound"] = list(self.unbound)
        return data

    @classmethod
    def from_json(cls, data: dict) -> TaskSpec:
        return cls(
            family_id=data["family_id"],
            template=data["template"],
            bindings=dict(data.get("bindings", {})),
            site=data["site"],
            unbound=tuple(data.get("unbound", ())),
        )


@dataclass(frozen=True)
class GuidanceNote:
    """A raw human guidance message and what it was parsed into."""

    note_id: str
    run_id: str
    raw_text: str
    parsed_into: tuple[str, ...] = ()


@dataclass(frozen=True)
class Violation:
    """One validation problem; unit_index is None for document-level issues."""

    unit_index: int | None
    field: str
    message: str


def content_id(prefix: str, *parts: object) -> str:
    """Stable content-derived identifier: same inputs, same id."""
    payload = json.dumps(parts, sort_keys=True, ensure_ascii=False, default=str)
    return f"{prefix}-{hashlib.sha256(payload.encode('utf-8')).hexdigest()[:16]}"


def validate_workflow(doc: WorkflowDoc) -> list[Violation]:
    """Pure, total validation; returns all violations instead of raising."""
    out: list[Violation] = []
    if doc.version < 1:
        out.append(Violation(None, "version", f"version must be >= 1, got {doc.version}"))
    if not doc.family_id:
        out.append(Violation(None, "family_id", "family_id is empty"))
    if not doc.workflow_id:
        out.append(Violation(None, "workflow_id", "workflow_id is empty"))
    for pos, unit in enumerate(doc.units):
        if unit.index != pos:
            out.append(
                Violation(pos, "index", f"unit at position {pos} has index {unit.index}; indices must be contiguous from 0")
            )
        if not unit.action_text.strip():
            out.append(Violation(pos, "action_text", "action_text is empty"))
        for check in unit.pre_checks:
            if check.phase is not Phase.PRE:
                out.append(Violation(pos, "pre_checks", f"check {check.check_id} in pre_checks has phase {check.phase.value}"))
        for check in unit.post_checks:
            if check.phase is not Phase.POST:
                out.append(Violation(pos, "post_checks", f"check {check.check_id} in post_checks has phase {check.phase.value}"))
        for check in unit.checks():
            if not check.nl_text.strip():
                out.append(Violation(pos, "nl_text", f"check {check.check_id} has empty nl_text"))
        ranks = [fb.rank for fb in unit.fallbacks]
        if ranks != list(range(1, len(ranks) + 1)):
            out.append(
                Violation(pos, "fallbacks", f"fallback ranks must be 1..{len(ranks)} in order, got {ranks}")
            )
        seen_ids: set[str] = set()
        for item_id in [c.check_id for c in unit.checks()] + [f.fallback_id for f in unit.fallbacks]:
            if item_id in seen_ids:
                out.append(Violation(pos, "ids", f"duplicate guard id {item_id}"))
            seen_ids.add(item_id)
    return out


def _map_texts(doc: WorkflowDoc, fn) -> WorkflowDoc:
    """Apply fn to every human-text and literal-bearing string in the doc."""

    def map_cmd(cmd: ActionCommand) -> ActionCommand:
        return replace(
            cmd,
            target=fn(cmd.target) if cmd.target else "",
            text=fn(cmd.text) if cmd.text else "",
            url=fn(cmd.url) if cmd.url else "",
            option=fn(cmd.option) if cmd.option else "",
            query=fn(cmd.query) if cmd.query else "",
        )

    def map_pred(pred: Predicate | None) -> Predicate | None:
        if pred is None:
            return None
        return replace(
            pred,
            target=fn(pred.target) if pred.target else "",
            value=fn(pred.value) if pred.value else "",
        )

    def map_check(check: ConditionCheck) -> ConditionCheck:
        return replace(check, nl_text=fn(check.nl_text), predicate=map_pred(check.predicate))

    def map_fb(fb: FallbackAction) -> FallbackAction:
        return replace(fb, nl_text=fn(fb.nl_text), commands=tuple(map_cmd(c) for c in fb.commands))

    units = tuple(
        replace(
            unit,
            action_text=fn(unit.action_text),
            pre_checks=tuple(map_check(c) for c in unit.pre_checks),
            post_checks=tuple(map_check(c) for c in unit.post_checks),
            fallbacks=tuple(map_fb(f) for f in unit.fallbacks),
        )
        for unit in doc.units
    )
    return replace(doc, units=units)


def genericize(doc: WorkflowDoc, bindings: dict[str, str]) -> WorkflowDoc:
    """Replace every occurrence of a bound literal with its slot marker.

    Longest literals win; duplicate literals raise
    :class:`slots.AmbiguousLiteral`.  ``bind(genericize(d, b), b)`` is
    text-identical to ``d``.
    """
    replacements = slots.ordered_replacements(bindings)
    return _map_texts(doc, lambda text: slots.genericize_text(text, replacements))


def bind(doc: WorkflowDoc, bindings: dict[str, str]) -> WorkflowDoc:
    """Substitute values for every slot marker; unbound markers raise."""
    missing: list[str] = []

    def check_covered(text: str) -> str:
        for name in slots.find_slots(text):
            if name not in bindings and name not in missing:
                missing.append(name)
        return text

    _map_texts(doc, check_covered)
    if missing:
        raise slots.MissingSlot(missing[0])
    return _map_texts(doc, lambda text: slots.bind_text(text, bindings))


def doc_slots(doc: WorkflowDoc) -> list[str]:
    """All slot names appearing anywhere in the document, in order."""
    found: list[str] = []

    def collect(text: str) -> str:
        for name in slots.find_slots(text):
            if name not in found:
                found.append(name)
        return text

    _map_texts(doc, collect)
    return found


class FamilyMismatch(ValueError):
    """Diffed documents belong to different task families."""


@dataclass(frozen=True)
class DiffEntry:
    """One added/removed/changed guard in a diff."""

    kind: str  # "check" | "fallback"
    change: str  # "added" | "removed" | "rank"
    item_id: str
    nl_text: str
    origin: Origin
    old_rank: int = 0
    new_rank: int = 0


@dataclass(frozen=True)
class UnitDiff:
    unit_index: int
    entries: tuple[DiffEntry, ...]


@dataclass(frozen=True)
class DiffReport:
    family_id: str
    old_version: int
    new_version: int
    unit_diffs: tuple[UnitDiff, ...]
    added_units: tuple[int, ...] = ()
    removed_units: tuple[int, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.unit_diffs and not self.added_units and not self.removed_units

    def to_json(self) -> dict:
        return {
            "family_id": self.family_id,
            "old_version": self.old_version,
            "new_version": self.new_version,
            "added_units": list(self.added_units),
            "removed_units": list(self.removed_units),
            "unit_diffs": [
                {
                    "unit_index": ud.unit_index,
                    "entries": [
                        {
                            "kind": e.kind,
                            "change": e.change,
                            "item_id": e.item_id,
                            "nl_text": e.nl_text,
                            "origin": e.origin.value,
                            "old_rank": e.old_rank,
                            "new_rank": e.new_rank,
                        }
                        for e in ud.entries
                    ],
                }
                for ud in self.unit_diffs
            ],
        }


def diff_workflows(old: WorkflowDoc, new: WorkflowDoc) -> DiffReport:
    """Per-unit guard diff; a moved rank is reported as a change, not add+remove."""
    if old.family_id != new.family_id:
        raise FamilyMismatch(f"cannot diff across families: {old.family_id!r} vs {new.family_id!r}")
    unit_diffs: list[UnitDiff] = []
    common = min(len(old.units), len(new.units))
    for i in range(common):
        entries: list[DiffEntry] = []
        old_checks = {c.check_id: c for c in old.units[i].checks()}
        new_checks = {c.check_id: c for c in new.units[i].checks()}
        for cid in new_checks.keys() - old_checks.keys():
            c = new_checks[cid]
            entries.append(DiffEntry("check", "added", cid, c.nl_text, c.origin))
        for cid in old_checks.keys() - new_checks.keys():
            c = old_checks[cid]
            entries.append(DiffEntry("check", "removed", cid, c.nl_text, c.origin))
        old_fbs = {f.fallback_id: f for f in old.units[i].fallbacks}
        new_fbs = {f.fallback_id: f for f in new.units[i].fallbacks}
        for fid in new_fbs.keys() - old_fbs.keys():
            f = new_fbs[fid]
            entries.append(DiffEntry("fallback", "added", fid, f.nl_text, f.origin, new_rank=f.rank))
        for fid in old_fbs.keys() - new_fbs.keys():
            f = old_fbs[fid]
            entries.append(DiffEntry("fallback", "removed", fid, f.nl_text, f.origin, old_rank=f.rank))
        for fid in old_fbs.keys() & new_fbs.keys():
            if old_fbs[fid].rank != new_fbs[fid].rank:
                f = new_fbs[fid]
                entries.append(
                    DiffEntry("fallback", "rank", fid, f.nl_text, f.origin, old_rank=old_fbs[fid].rank, new_rank=f.rank)
                )
        if entries:
            entries.sort(key=lambda e: (e.kind, e.change, e.item_id))
            unit_diffs.append(UnitDiff(i, tuple(entries)))
    return DiffReport(
        family_id=old.family_id,
        old_version=old.version,
        new_version=new.version,
        unit_diffs=tuple(unit_diffs),
        added_units=tuple(range(common, len(new.units))),
        removed_units=tuple(range(common, len(old.units))),
    )
