"""SimWeb: a deterministic, fault-injecting simulated web environment.

A site definition is pure data: pages with element inventories, transition
rules, a goal over the final state, and a fault menu.  Every random draw is
keyed by (run seed, fault seed, clock), so replaying a run reproduces the
exact same faults and snapshots byte for byte.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum

from . import slots
from .actions import ActionCommand, CommandKind, describe_past
from .env import (
    ActionOutcome,
    Element,
    OutcomeStatus,
    Overlay,
    PageSnapshot,
    Role,
    SessionClosed,
    evaluate_predicate,
    make_snapshot,
)
from .model import Predicate


class FaultKind(str, Enum):
    POPUP = "popup"
    LAYOUT_SHIFT = "layout_shift"
    STALE_ELEMENT = "stale_element"
    SLOW_LOAD = "slow_load"
    INTERCEPTED_CLICK = "intercepted_click"


@dataclass(frozen=True)
class FaultSpec:
    """One fault source. Overlay-producing faults fire at most once per run."""

    kind: FaultKind
    seed: int
    at_clock: int = -1
    probability: float = 1.0
    overlay_id: str = ""
    overlay_label: str = ""

    def __post_init__(self) -> None:
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"fault probability must be in [0,1], got {self.probability}")


@dataclass(frozen=True)
class ElementDef:
    element_id: str
    role: Role
    label: str
    text: str = ""
    options: tuple[str, ...] = ()
    required_field: bool = False
    submit_gate: bool = False  # enabled only while all required fields are set


@dataclass(frozen=True)
class PageDef:
    name: str
    title: str
    elements: tuple[ElementDef, ...]
    fold: int = 0  # elements at index >= fold hide after a layout shift


@dataclass(frozen=True)
class SetTextFrom:
    """Effect: compose a destination element's text from current field values."""

    element_id: str
    template: str  # slot markers name form field labels of the source page


@dataclass(frozen=True)
class MirrorFields:
    """Effect: copy each named form field's value into a mirror element."""

    mapping: tuple[tuple[str, str], ...]  # (source field label, destination element_id)


Effect = SetTextFrom | MirrorFields


@dataclass(frozen=True)
class TransitionRule:
    page: str
    kind: CommandKind
    target_label: str
    goto: str = ""
    effects: tuple[Effect, ...] = ()


@dataclass(frozen=True)
class SimGoal:
    """Goal over the final snapshot plus the submitted answer.

    Predicate targets/values may contain slot markers; they are bound with
    the task's bindings when a session is created.
    """

    predicates: tuple[Predicate, ...]
    answer_required: bool = True
    answer_substring: str = ""


@dataclass(frozen=True)
class SlotAxis:
    kind: str  # VariationKind value
    alternatives: tuple[str, ...]


@dataclass(frozen=True)
class FormField:
    slot: str
    label: str  # element label on this site's form page
    kind: str  # "type" | "select"


@dataclass(frozen=True)
class SimSiteDef:
    site_id: str
    entry_page: str
    pages: tuple[PageDef, ...]
    transitions: tuple[TransitionRule, ...]
    goal: SimGoal
    faults: tuple[FaultSpec, ...] = ()
    slot_axes: dict[str, SlotAxis] = field(default_factory=dict)
    form_fields: tuple[FormField, ...] = ()
    submit_label: str = ""
    read_label: str = ""
    web_search_page: str = ""

    def page(self, name: str) -> PageDef:
        for page in self.pages:
            if page.name == name:
                return page
        raise KeyError(f"site {self.site_id} has no page {name!r}")

    def url_of(self, page: str) -> str:
        return f"sim://{self.site_id}/{page}"


def stable_hash(*parts: object) -> int:
    payload = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


def _draw(run_seed: int, fault: FaultSpec, clock: int) -> float:
    # One uniform draw per (run, fault, clock); independent of call order.
    h = stable_hash(run_seed, fault.kind.value, fault.seed, clock)
    return (h % 10_000_019) / 10_000_019.0


class SimWeb:
    """Deterministic simulated browser session for one site and one task."""

    def __init__(self, site: SimSiteDef, bindings: dict[str, str]) -> None:
        self.site = site
        self.bindings = dict(bindings)
        self.goal = SimGoal(
            predicates=tuple(
                replace(
                    p,
                    target=slots.substitute(p.target, self.bindings, partial=True),
                    value=slots.substitute(p.value, self.bindings, partial=True),
                )
                for p in site.goal.predicates
            ),
            answer_required=site.goal.answer_required,
            answer_substring=slots.substitute(site.goal.answer_substring, self.bindings, partial=True),
        )
        self._seed = 0
        self._started = False
        self._closed = False
        self.history: list[ActionCommand] = []
        self._init_state()

    def _init_state(self) -> None:
        self.page_name = self.site.entry_page
        self.clock = 0
        self.overlays: list[Overlay] = []
        self.fired_faults: set[tuple[str, int]] = set()
        self.field_values: dict[str, str] = {}  # element_id -> value
        self.shifted_pages: set[str] = set()
        self.submitted_answer: str | None = None

    # -- session lifecycle ---------------------------------------------------

    def reset(self, seed: int) -> PageSnapshot:
        if self._closed:
            raise SessionClosed("session is closed")
        self._seed = seed
        self._started = True
        self.history = []
        self._init_state()
        return self.snapshot()

    def close(self) -> None:
        self._closed = True

    def session_ref(self) -> dict:
        """Everything needed to rebuild this session by replay."""
        return {
            "site_id": self.site.site_id,
            "bindings": dict(self.bindings),
            "seed": self._seed,
            "history": [cmd.to_json() for cmd in self.history],
        }

    @classmethod
    def restore(cls, site: SimSiteDef, ref: dict) -> SimWeb:
        env = cls(site, ref["bindings"])
        env.reset(ref["seed"])
        for data in ref["history"]:
            env.apply(ActionCommand.from_json(data))
        return env

    # -- snapshots -------------------------------------------------------------

    def _materialize(self) -> tuple[Element, ...]:
        page = self.site.page(self.page_name)
        required_ids = [e.element_id for e in page.elements if e.required_field]
        required_ok = all(self.field_values.get(eid, "") for eid in required_ids)
        shifted = self.page_name in self.shifted_pages
        out = []
        for idx, el in enumerate(page.elements):
            hidden_by_shift = shifted and page.fold and idx >= page.fold
            out.append(
                Element(
                    element_id=el.element_id,
                    role=el.role,
                    label=el.label,
                    text_value=self.field_values.get(el.element_id, el.text),
                    visible=not hidden_by_shift,
                    enabled=required_ok if el.submit_gate else True,
                    in_viewport=not hidden_by_shift,
                )
            )
        return tuple(out)

    def snapshot(self) -> PageSnapshot:
        if self._closed:
            raise SessionClosed("session is closed")
        page = self.site.page(self.page_name)
        return make_snapshot(
            url=self.site.url_of(page.name),
            title=page.title,
            elements=self._materialize(),
            overlays=tuple(self.overlays),
            clock=self.clock,
        )

    # -- faults ------------------------------------------------------------------

    def _maybe_fire_popup(self, step: int) -> None:
        for fault in self.site.faults:
            if fault.kind is not FaultKind.POPUP:
                continue
            key = (f"popup:{fault.seed}", 0)
            if key in self.fired_faults or fault.at_clock != step:
                continue
            if _draw(self._seed, fault, step) < fault.probability:
                self.fired_faults.add(key)
                self.overlays.append(Overlay(fault.overlay_id or "popup", fault.overlay_label or "Dismiss"))

    def _maybe_fire_layout_shift(self, step: int) -> None:
        for fault in self.site.faults:
            if fault.kind is not FaultKind.LAYOUT_SHIFT:
                continue
            key = (f"shift:{fault.seed}", 0)
            if key in self.fired_faults or fault.at_clock != step:
                continue
            if _draw(self._seed, fault, step) < fault.probability:
                self.fired_faults.add(key)
                self.shifted_pages.add(self.page_name)

    def _maybe_intercept_click(self, step: int) -> Overlay | None:
        for fault in self.site.faults:
            if fault.kind is not FaultKind.INTERCEPTED_CLICK:
                continue
            key = (f"intercept:{fault.seed}", 0)
            if key in self.fired_faults:
                continue
            if _draw(self._seed, fault, step) < fault.probability:
                self.fired_faults.add(key)
                overlay = Overlay(fault.overlay_id or "banner", fault.overlay_label or "Accept")
                self.overlays.append(overlay)
                return overlay
        return None

    def _stale_now(self, step: int) -> bool:
        return any(
            fault.kind is FaultKind.STALE_ELEMENT and _draw(self._seed, fault, step) < fault.probability
            for fault in self.site.faults
        )

    def _slow_now(self, step: int) -> bool:
        return any(
            fault.kind is FaultKind.SLOW_LOAD and _draw(self._seed, fault, step) < fault.probability
            for fault in self.site.faults
        )

    # -- command application -----------------------------------------------------

    def _find(self, label: str) -> Element | None:
        # Ambiguous labels resolve to the first visible, enabled match in
        # document order; a visible-but-disabled match is kept as a fallback
        # so the outcome can report it as inactive rather than missing.
        disabled_match = None
        for el in self._materialize():
            if el.visible and el.label == label:
                if el.enabled:
                    return el
                if disabled_match is None:
                    disabled_match = el
        return disabled_match

    def _transition(self, kind: CommandKind, label: str) -> TransitionRule | None:
        for rule in self.site.transitions:
            if rule.page == self.page_name and rule.kind is kind and rule.target_label == label:
                return rule
        return None

    def _field_values_by_label(self) -> dict[str, str]:
        # Form values survive navigation, so effects may reference fields from
        # any page (e.g. a second hop re-mirrors the original form inputs).
        return {
            el.label: self.field_values.get(el.element_id, el.text)
            for page in self.site.pages
            for el in page.elements
            if el.role in (Role.TEXTBOX, Role.SELECT)
        }

    def _apply_effects(self, rule: TransitionRule) -> None:
        values = self._field_values_by_label()
        for effect in rule.effects:
            if isinstance(effect, MirrorFields):
                for src_label, dst_id in effect.mapping:
                    self.field_values[dst_id] = values.get(src_label, "")
            else:
                self.field_values[effect.element_id] = slots.substitute(
                    effect.template, values, partial=True
                )

    def _done(self, status: OutcomeStatus, message: str, overlay_id: str = "") -> ActionOutcome:
        self.clock += 1
        return ActionOutcome(status=status, message=message, after=self.snapshot(), overlay_id=overlay_id)

    def apply(self, command: ActionCommand) -> ActionOutcome:
        if self._closed:
            raise SessionClosed("session is closed")
        if not self._started:
            raise SessionClosed("session not reset")
        self.history.append(command)
        step = self.clock
        self._maybe_fire_popup(step)
        self._maybe_fire_layout_shift(step)
        kind = command.kind

        if kind is CommandKind.CLICK:
            # A click may dismiss an active overlay by its label.
            for overlay in list(self.overlays):
                if overlay.label == command.target:
                    self.overlays.remove(overlay)
                    return self._done(OutcomeStatus.OK, describe_past(command))
            if self.overlays:
                blocking = self.overlays[0]
                return self._done(
                    OutcomeStatus.INTERCEPTED,
                    f'Couldn\'t click "{command.target}" because the "{blocking.overlay_id}" overlay is blocking it',
                    overlay_id=blocking.overlay_id,
                )
            intercept = self._maybe_intercept_click(step)
            if intercept is not None:
                return self._done(
                    OutcomeStatus.INTERCEPTED,
                    f'Couldn\'t click "{command.target}" because the "{intercept.overlay_id}" overlay is blocking it',
                    overlay_id=intercept.overlay_id,
                )
            if self._stale_now(step):
                return self._done(
                    OutcomeStatus.ELEMENT_NOT_FOUND,
                    f'The "{command.target}" element can\'t be located right now',
                )
            element = self._find(command.target)
            if element is None:
                return self._done(
                    OutcomeStatus.ELEMENT_NOT_FOUND, f'The "{command.target}" element can\'t be located'
                )
            if not element.enabled:
                return self._done(OutcomeStatus.DISABLED, f'The "{command.target}" button is inactive')
            rule = self._transition(CommandKind.CLICK, command.target)
            if rule is None:
                return self._done(
                    OutcomeStatus.NO_EFFECT, f'Clicking "{command.target}" didn\'t change the page'
                )
            if rule.goto and self._slow_now(step):
                return self._done(
                    OutcomeStatus.TIMEOUT,
                    f'The page doesn\'t load after clicking "{command.target}"',
                )
            self._apply_effects(rule)
            if rule.goto:
                self.page_name = rule.goto
            return self._done(OutcomeStatus.OK, describe_past(command))

        if kind in (CommandKind.TYPE_TEXT, CommandKind.SELECT):
            if self.overlays:
                blocking = self.overlays[0]
                verb = "type into" if kind is CommandKind.TYPE_TEXT else "select in"
                return self._done(
                    OutcomeStatus.INTERCEPTED,
                    f'Couldn\'t {verb} "{command.target}" because the "{blocking.overlay_id}" overlay is blocking it',
                    overlay_id=blocking.overlay_id,
                )
            if self._stale_now(step):
                return self._done(
                    OutcomeStatus.ELEMENT_NOT_FOUND,
                    f'The "{command.target}" element can\'t be located right now',
                )
            element = self._find(command.target)
            if element is None:
                return self._done(
                    OutcomeStatus.ELEMENT_NOT_FOUND, f'The "{command.target}" field can\'t be located'
                )
            if kind is CommandKind.TYPE_TEXT:
                if element.role is not Role.TEXTBOX:
                    return self._done(
                        OutcomeStatus.NO_EFFECT, f'"{command.target}" didn\'t accept typed text'
                    )
                self.field_values[element.element_id] = command.text
                return self._done(OutcomeStatus.OK, describe_past(command))
            page_el = next(
                e for e in self.site.page(self.page_name).elements if e.element_id == element.element_id
            )
            if element.role is not Role.SELECT or (
                page_el.options and command.option not in page_el.options
            ):
                return self._done(
                    OutcomeStatus.NO_EFFECT,
                    f'"{command.target}" didn\'t offer the option "{command.option}"',
                )
            self.field_values[element.element_id] = command.option
            return self._done(OutcomeStatus.OK, describe_past(command))

        if kind is CommandKind.VISIT_URL:
            prefix = f"sim://{self.site.site_id}/"
            if command.url.startswith(prefix):
                page = command.url[len(prefix) :].strip("/")
                try:
                    self.site.page(page)
                except KeyError:
                    return self._done(
                        OutcomeStatus.NO_EFFECT, f"The page at {command.url} doesn't load"
                    )
                if self._slow_now(step) and page != self.page_name:
                    return self._done(
                        OutcomeStatus.TIMEOUT, f"The page at {command.url} doesn't load in time"
                    )
                self.page_name = page
                return self._done(OutcomeStatus.OK, describe_past(command))
            return self._done(
                OutcomeStatus.NO_EFFECT, f"Navigation outside this site failed to open {command.url}"
            )

        if kind is CommandKind.SCROLL:
            if self.page_name in self.shifted_pages:
                self.shifted_pages.remove(self.page_name)
            return self._done(OutcomeStatus.OK, describe_past(command))

        if kind is CommandKind.READ_TEXT:
            element = self._find(command.target)
            if element is None:
                return self._done(
                    OutcomeStatus.ELEMENT_NOT_FOUND, f'The "{command.target}" element can\'t be located'
                )
            return self._done(OutcomeStatus.OK, f'Read "{command.target}": {element.text_value}')

        if kind is CommandKind.WEB_SEARCH:
            if self.site.web_search_page:
                self.page_name = self.site.web_search_page
                return self._done(OutcomeStatus.OK, describe_past(command))
            return self._done(OutcomeStatus.NO_EFFECT, "Web search didn't return usable results")

        if kind is CommandKind.ANSWER:
            self.submitted_answer = command.text
            return self._done(OutcomeStatus.OK, describe_past(command))

        # CAPTURE_STATE
        return self._done(OutcomeStatus.OK, describe_past(command))

    # -- goal --------------------------------------------------------------------

    def goal_satisfied(self) -> tuple[bool, str]:
        """Evaluate the instantiated goal; returns (ok, rationale)."""
        snap = self.snapshot()
        failed = [p for p in self.goal.predicates if not evaluate_predicate(p, snap)]
        if failed:
            first = failed[0]
            return False, f"goal predicate failed: {first.kind.value}({first.target or first.value})"
        if self.goal.answer_required and not self.submitted_answer:
            return False, "no answer was submitted"
        if self.goal.answer_substring and self.goal.answer_substring not in (self.submitted_answer or ""):
            return False, f"answer does not mention {self.goal.answer_substring!r}"
        return True, "all goal predicates hold and the answer is acceptable"
