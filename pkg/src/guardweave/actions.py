"""Browser action vocabulary with a canonical natural-language clause form.

Every command has exactly one imperative clause rendering and the clause
grammar parses back to the same command, so step texts stay human-readable
while remaining executable.  Multi-command step texts join clauses with
``"; then "``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum


class CommandKind(str, Enum):
    VISIT_URL = "visit_url"
    CLICK = "click"
    TYPE_TEXT = "type_text"
    SCROLL = "scroll"
    SELECT = "select"
    READ_TEXT = "read_text"
    WEB_SEARCH = "web_search"
    ANSWER = "answer"
    CAPTURE_STATE = "capture_state"


# Commands that address a page element by label.
ELEMENT_KINDS = frozenset(
    {CommandKind.CLICK, CommandKind.TYPE_TEXT, CommandKind.SELECT, CommandKind.READ_TEXT}
)

CLAUSE_JOIN = "; then "


class ClauseError(ValueError):
    """A clause does not match the action grammar."""


@dataclass(frozen=True)
class ActionCommand:
    """One browser-level action. Unused fields stay at their defaults."""

    kind: CommandKind
    target: str = ""
    text: str = ""
    url: str = ""
    option: str = ""
    query: str = ""
    direction: str = ""
    amount: int = 0

    def __post_init__(self) -> None:
        if self.kind in ELEMENT_KINDS and not self.target:
            raise ValueError(f"{self.kind.value} requires a target label")

    @classmethod
    def visit(cls, url: str) -> ActionCommand:
        return cls(CommandKind.VISIT_URL, url=url)

    @classmethod
    def click(cls, target: str) -> ActionCommand:
        return cls(CommandKind.CLICK, target=target)

    @classmethod
    def type_text(cls, target: str, text: str) -> ActionCommand:
        return cls(CommandKind.TYPE_TEXT, target=target, text=text)

    @classmethod
    def scroll(cls, direction: str = "down", amount: int = 1) -> ActionCommand:
        return cls(CommandKind.SCROLL, direction=direction, amount=amount)

    @classmethod
    def select(cls, target: str, option: str) -> ActionCommand:
        return cls(CommandKind.SELECT, target=target, option=option)

    @classmethod
    def read(cls, target: str) -> ActionCommand:
        return cls(CommandKind.READ_TEXT, target=target)

    @classmethod
    def web_search(cls, query: str) -> ActionCommand:
        return cls(CommandKind.WEB_SEARCH, query=query)

    @classmethod
    def answer(cls, text: str) -> ActionCommand:
        return cls(CommandKind.ANSWER, text=text)

    @classmethod
    def capture(cls) -> ActionCommand:
        return cls(CommandKind.CAPTURE_STATE)

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind.value}
        for name in ("target", "text", "url", "option", "query", "direction"):
            value = getattr(self, name)
            if value:
                out[name] = value
        if self.amount:
            out["amount"] = self.amount
        return out

    @classmethod
    def from_json(cls, data: dict) -> ActionCommand:
        kind = CommandKind(data["kind"])
        return cls(
            kind,
            target=data.get("target", ""),
            text=data.get("text", ""),
            url=data.get("url", ""),
            option=data.get("option", ""),
            query=data.get("query", ""),
            direction=data.get("direction", ""),
            amount=int(data.get("amount", 0)),
        )


def describe(cmd: ActionCommand) -> str:
    """Canonical imperative clause for *cmd*."""
    k = cmd.kind
    if k is CommandKind.VISIT_URL:
        return f"navigate to {cmd.url}"
    if k is CommandKind.CLICK:
        return f'click "{cmd.target}"'
    if k is CommandKind.TYPE_TEXT:
        return f'type "{cmd.text}" into "{cmd.target}"'
    if k is CommandKind.SCROLL:
        return f"scroll {cmd.direction} {cmd.amount}"
    if k is CommandKind.SELECT:
        return f'select "{cmd.option}" in "{cmd.target}"'
    if k is CommandKind.READ_TEXT:
        return f'read "{cmd.target}"'
    if k is CommandKind.WEB_SEARCH:
        return f'search the web for "{cmd.query}"'
    if k is CommandKind.ANSWER:
        return f'answer with "{cmd.text}"'
    return "capture the page state"


def describe_past(cmd: ActionCommand) -> str:
    """Past-tense description used in successful outcome messages."""
    k = cmd.kind
    if k is CommandKind.VISIT_URL:
        return f"Navigated to {cmd.url}"
    if k is CommandKind.CLICK:
        return f'Clicked "{cmd.target}"'
    if k is CommandKind.TYPE_TEXT:
        return f'Typed "{cmd.text}" into "{cmd.target}"'
    if k is CommandKind.SCROLL:
        return f"Scrolled {cmd.direction} {cmd.amount}"
    if k is CommandKind.SELECT:
        return f'Selected "{cmd.option}" in "{cmd.target}"'
    if k is CommandKind.READ_TEXT:
        return f'Read "{cmd.target}"'
    if k is CommandKind.WEB_SEARCH:
        return f'Searched the web for "{cmd.query}"'
    if k is CommandKind.ANSWER:
        return f'Answered with "{cmd.text}"'
    return "Captured the page state"


_QUOTED = r'"((?:[^"])*)"'
_CLAUSE_PATTERNS: list[tuple[re.Pattern[str], object]] = [
    (re.compile(r"^navigate to (\S+)$"), lambda m: ActionCommand.visit(m.group(1))),
    (re.compile(rf"^click {_QUOTED}$"), lambda m: ActionCommand.click(m.group(1))),
    (
        re.compile(rf"^type {_QUOTED} into {_QUOTED}$"),
        lambda m: ActionCommand.type_text(m.group(2), m.group(1)),
    ),
    (
        re.compile(r"^scroll (up|down) (\d+)$"),
        lambda m: ActionCommand.scroll(m.group(1), int(m.group(2))),
    ),
    (
        re.compile(rf"^select {_QUOTED} in {_QUOTED}$"),
        lambda m: ActionCommand.select(m.group(2), m.group(1)),
    ),
    (re.compile(rf"^read {_QUOTED}$"), lambda m: ActionCommand.read(m.group(1))),
    (
        re.compile(rf"^search the web for {_QUOTED}$"),
        lambda m: ActionCommand.web_search(m.group(1)),
    ),
    (re.compile(rf"^answer with {_QUOTED}$"), lambda m: ActionCommand.answer(m.group(1))),
    (re.compile(r"^capture the page state$"), lambda m: ActionCommand.capture()),
]


def parse_clause(clause: str) -> ActionCommand:
    """Parse one canonical clause back into a command."""
    stripped = clause.strip()
    for pattern, build in _CLAUSE_PATTERNS:
        m = pattern.match(stripped)
        if m:
            return build(m)  # type: ignore[operator]
    raise ClauseError(f"clause does not match the action grammar: {clause!r}")


def parse_action_text(text: str) -> list[ActionCommand]:
    """Parse a step text (clauses joined by ``"; then "``)."""
    return [parse_clause(part) for part in text.split(CLAUSE_JOIN)]


def join_clauses(commands: list[ActionCommand] | tuple[ActionCommand, ...]) -> str:
    return CLAUSE_JOIN.join(describe(c) for c in commands)


# Lenient verbs accepted when turning free-form guidance into commands.
_LENIENT_VERBS = re.compile(
    r"^(?:please\s+)?(?:then\s+)?(click|press|type|enter|navigate|go|visit|select|choose|"
    r"scroll|dismiss|close|search|answer|read)\b",
    re.IGNORECASE,
)


def parse_lenient(clause: str) -> ActionCommand | None:
    """Best-effort parse of a free-form imperative clause.

    Returns None when the clause is not recognizably an action.  Quoted
    labels are preferred; otherwise the trailing words are used as the label.
    """
    stripped = clause.strip().rstrip(".!")
    try:
        return parse_clause(stripped)
    except ClauseError:
        pass
    m = _LENIENT_VERBS.match(stripped)
    if not m:
        return None
    verb = m.group(1).lower()
    rest = stripped[m.end() :].strip()
    quoted = re.findall(_QUOTED, rest)

    def label_from(text: str) -> str:
        if quoted:
            return quoted[0]
        words = [w for w in re.sub(r"[^\w\s-]", " ", text).split() if w.lower() not in
                 {"the", "a", "an", "on", "button", "again", "tab", "link", "field", "box"}]
        return " ".join(words)

    if verb in {"click", "press", "dismiss", "close"}:
        label = label_from(rest)
        return ActionCommand.click(label) if label else None
    if verb in {"type", "enter"}:
        m2 = re.match(rf"^{_QUOTED}\s+(?:into|in)\s+(?:the\s+)?{_QUOTED}", rest)
        if m2:
            return ActionCommand.type_text(m2.group(2), m2.group(1))
        return None
    if verb in {"navigate", "go", "visit"}:
        m3 = re.search(r"(\S+://\S+)", rest)
        if m3:
            return ActionCommand.visit(m3.group(1))
        return None
    if verb in {"select", "choose"}:
        m4 = re.match(rf"^{_QUOTED}\s+(?:in|from|for)\s+(?:the\s+)?{_QUOTED}", rest)
        if m4:
            return ActionCommand.select(m4.group(2), m4.group(1))
        return None
    if verb == "scroll":
        direction = "up" if "up" in rest.lower() else "down"
        return ActionCommand.scroll(direction, 1)
    if verb == "search":
        if quoted:
            return ActionCommand.web_search(quoted[0])
        return None
    if verb == "answer":
        if quoted:
            return ActionCommand.answer(quoted[0])
        return None
    if verb == "read":
        label = label_from(rest)
        return ActionCommand.read(label) if label else None
    return None


def command_to_wire(commands: list[ActionCommand] | tuple[ActionCommand, ...]) -> dict | None:
    """Serialize a recovery command list for the workflow file format."""
    if not commands:
        return None
    if len(commands) == 1:
        return commands[0].to_json()
    return {"kind": "sequence", "steps": [c.to_json() for c in commands]}


def commands_from_wire(data: dict | None) -> tuple[ActionCommand, ...]:
    if data is None:
        return ()
    if data.get("kind") == "sequence":
        return tuple(ActionCommand.from_json(step) for step in data["steps"])
    return (ActionCommand.from_json(data),)
