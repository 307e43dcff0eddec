"""Environment-facing types: snapshots, outcomes, predicate evaluation.

A snapshot is a pure value; its screenshot reference is a content hash of a
deterministic text-grid rendering, so identical page states always share one
image.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import Protocol

from .actions import ELEMENT_KINDS, ActionCommand
from .model import Predicate, PredicateKind


class Role(str, Enum):
    BUTTON = "button"
    LINK = "link"
    TEXTBOX = "textbox"
    SELECT = "select"
    TEXT = "text"
    IMAGE = "image"


FIELD_ROLES = frozenset({Role.TEXTBOX, Role.SELECT})


@dataclass(frozen=True)
class Element:
    element_id: str
    role: Role
    label: str
    text_value: str = ""
    visible: bool = True
    enabled: bool = True
    in_viewport: bool = True


@dataclass(frozen=True)
class Overlay:
    """A blocking layer; clicking its label dismisses it."""

    overlay_id: str
    label: str


@dataclass(frozen=True)
class PageSnapshot:
    url: str
    title: str
    elements: tuple[Element, ...]
    overlays: tuple[Overlay, ...]
    clock: int
    screenshot_ref: str

    def page_path(self) -> str:
        # sim://site/page -> /page
        rest = self.url.split("://", 1)[-1]
        slash = rest.find("/")
        return rest[slash:] if slash >= 0 else "/"

    def to_json(self) -> dict:
        return {
            "url": self.url,
            "title": self.title,
            "clock": self.clock,
            "screenshot_ref": self.screenshot_ref,
            "overlays": [{"overlay_id": o.overlay_id, "label": o.label} for o in self.overlays],
            "elements": [
                {
                    "element_id": e.element_id,
                    "role": e.role.value,
                    "label": e.label,
                    "text_value": e.text_value,
                    "visible": e.visible,
                    "enabled": e.enabled,
                    "viewport": e.in_viewport,
                }
                for e in self.elements
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> PageSnapshot:
        return cls(
            url=data["url"],
            title=data["title"],
            clock=data["clock"],
            screenshot_ref=data["screenshot_ref"],
            overlays=tuple(Overlay(o["overlay_id"], o["label"]) for o in data["overlays"]),
            elements=tuple(
                Element(
                    element_id=e["element_id"],
                    role=Role(e["role"]),
                    label=e["label"],
                    text_value=e["text_value"],
                    visible=e["visible"],
                    enabled=e["enabled"],
                    in_viewport=e["viewport"],
                )
                for e in data["elements"]
            ),
        )

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False).encode("utf-8")


def render_layout_text(url: str, title: str, elements: tuple[Element, ...], overlays: tuple[Overlay, ...]) -> str:
    """Deterministic text-grid rendering used for screenshots and digests."""
    lines = [f"[{title}]", url, "=" * 48]
    for overlay in overlays:
        lines.append(f"### OVERLAY {overlay.overlay_id}: [{overlay.label}] ###")
    for el in elements:
        if not el.visible:
            continue
        if el.role is Role.BUTTON:
            cell = f"( {el.label} )" + ("" if el.enabled else " [disabled]")
        elif el.role is Role.LINK:
            cell = f"<{el.label}>"
        elif el.role in FIELD_ROLES:
            cell = f"[{el.label}: {el.text_value}]"
        else:
            cell = f"{el.label}: {el.text_value}" if el.text_value else el.label
        lines.append(cell)
    return "\n".join(lines)


def make_snapshot(
    *,
    url: str,
    title: str,
    elements: tuple[Element, ...],
    overlays: tuple[Overlay, ...],
    clock: int,
) -> PageSnapshot:
    layout = render_layout_text(url, title, elements, overlays)
    ref = hashlib.sha256(layout.encode("utf-8")).hexdigest()
    return PageSnapshot(
        url=url, title=title, elements=elements, overlays=overlays, clock=clock, screenshot_ref=ref
    )


def render_screenshot_png(snapshot: PageSnapshot) -> bytes:
    """Render the snapshot's text grid into a small deterministic PNG."""
    from PIL import Image, ImageDraw

    layout = render_layout_text(snapshot.url, snapshot.title, snapshot.elements, snapshot.overlays)
    lines = layout.split("\n")
    width = max(len(line) for line in lines) * 7 + 16
    height = len(lines) * 12 + 16
    image = Image.new("RGB", (width, height), (250, 250, 245))
    draw = ImageDraw.Draw(image)
    for i, line in enumerate(lines):
        draw.text((8, 8 + i * 12), line, fill=(20, 20, 20))
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()


class OutcomeStatus(str, Enum):
    OK = "ok"
    ELEMENT_NOT_FOUND = "element_not_found"
    INTERCEPTED = "intercepted"
    DISABLED = "disabled"
    TIMEOUT = "timeout"
    NO_EFFECT = "no_effect"


FAILURE_STATUSES = frozenset(
    {
        OutcomeStatus.ELEMENT_NOT_FOUND,
        OutcomeStatus.INTERCEPTED,
        OutcomeStatus.DISABLED,
        OutcomeStatus.TIMEOUT,
        OutcomeStatus.NO_EFFECT,
    }
)


@dataclass(frozen=True)
class ActionOutcome:
    status: OutcomeStatus
    message: str
    after: PageSnapshot
    overlay_id: str = ""

    @property
    def ok(self) -> bool:
        return self.status is OutcomeStatus.OK


class AdapterUnavailable(RuntimeError):
    """The external environment endpoint cannot be reached."""


class SessionClosed(RuntimeError):
    """The environment session was closed and cannot accept commands."""


class EnvProtocolError(RuntimeError):
    """The environment peer violated the wire contract."""


class Env(Protocol):
    """Uniform action interface over simulated or real browsing sessions."""

    def reset(self, seed: int) -> PageSnapshot: ...

    def apply(self, command: ActionCommand) -> ActionOutcome: ...

    def snapshot(self) -> PageSnapshot: ...

    def close(self) -> None: ...


OVERLAY_DISMISS_ROLE = "overlay_dismiss"


def grounding_of(command: ActionCommand, snapshot: PageSnapshot) -> dict | None:
    """Describe where a command's target sits on this page, as a role plus
    its ordinal among visible elements of that role.  Pages that present the
    same controls in the same order under different labels can then be
    retargeted with :func:`ground_command`."""
    if command.kind not in ELEMENT_KINDS or not command.target:
        return None
    by_role: dict[Role, list[str]] = {}
    for element in snapshot.elements:
        if element.visible:
            by_role.setdefault(element.role, []).append(element.label)
    for role, labels in by_role.items():
        if command.target in labels:
            return {"role": role.value, "ordinal": labels.index(command.target)}
    return None


def ground_command(
    command: ActionCommand, grounding: dict | None, snapshot: PageSnapshot
) -> ActionCommand:
    """Retarget a command for the current page when its label is absent.

    Exact label matches (including overlay labels) are left alone; otherwise
    a recorded grounding picks the visible element of the same role at the
    same ordinal, so a structurally identical page with different wording
    still receives the action."""
    if command.kind not in ELEMENT_KINDS or not command.target:
        return command
    if any(e.visible and e.label == command.target for e in snapshot.elements):
        return command
    if any(o.label == command.target for o in snapshot.overlays):
        return command
    if not grounding or "role" not in grounding:
        return command
    if grounding["role"] == OVERLAY_DISMISS_ROLE:
        # a dismissal learned against one overlay retargets to whichever
        # overlay is blocking now (its label IS its dismiss control)
        if snapshot.overlays:
            ordinal = grounding.get("ordinal", 0)
            pick = ordinal if 0 <= ordinal < len(snapshot.overlays) else -1
            return replace(command, target=snapshot.overlays[pick].label)
        return command
    same_role = [
        e for e in snapshot.elements if e.visible and e.role.value == grounding["role"]
    ]
    ordinal = grounding.get("ordinal", -1)
    if 0 <= ordinal < len(same_role):
        return replace(command, target=same_role[ordinal].label)
    return command


def evaluate_predicate(predicate: Predicate, snapshot: PageSnapshot) -> bool:
    """Total, pure predicate evaluation over one snapshot."""
    kind = predicate.kind
    visible = [e for e in snapshot.elements if e.visible]
    if kind is PredicateKind.EXISTS:
        return any(e.label == predicate.target for e in visible)
    if kind is PredicateKind.NOT_EXISTS:
        return not any(e.label == predicate.target for e in visible)
    if kind is PredicateKind.TEXT_EQUALS:
        for e in visible:
            if e.label == predicate.target:
                return e.text_value == predicate.value
        return False
    if kind is PredicateKind.FIELD_VALUE:
        for e in visible:
            if e.label == predicate.target and e.role in FIELD_ROLES:
                return e.text_value == predicate.value
        return False
    if kind is PredicateKind.URL_CONTAINS:
        return predicate.value in snapshot.url
    if kind is PredicateKind.NO_OVERLAY:
        return not snapshot.overlays
    if kind is PredicateKind.COUNT_AT_LEAST:
        return sum(1 for e in visible if e.label == predicate.target) >= predicate.count
    return False
