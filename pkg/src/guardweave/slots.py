"""Slot-marker grammar shared by task templates and workflow texts.

A slot marker is ``<name>`` where the name may contain spaces but not angle
brackets.  A literal ``<`` is written by doubling it (``<<``).  Text produced
by :func:`genericize_text` always escapes stray ``<`` so that binding and
genericizing are exact inverses.
"""

from __future__ import annotations


class MissingSlot(KeyError):
    """A marker in the text has no value in the bindings."""

    def __init__(self, slot: str) -> None:
        super().__init__(slot)
        self.slot = slot

    def __str__(self) -> str:
        return f"no binding for slot <{self.slot}>"


class AmbiguousLiteral(ValueError):
    """Two slots are bound to the same literal, so replacement is ambiguous."""

    def __init__(self, literal: str, slots: tuple[str, str]) -> None:
        super().__init__(f"literal {literal!r} is bound by both <{slots[0]}> and <{slots[1]}>")
        self.literal = literal
        self.slots = slots


def find_slots(text: str) -> list[str]:
    """Return slot names appearing in *text*, in order, without duplicates."""
    names: list[str] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch != "<":
            i += 1
            continue
        if i + 1 < len(text) and text[i + 1] == "<":
            i += 2
            continue
        end = text.find(">", i + 1)
        if end == -1:
            break
        name = text[i + 1 : end]
        if name and name not in names:
            names.append(name)
        i = end + 1
    return names


def substitute(text: str, bindings: dict[str, str], *, partial: bool = False) -> str:
    """Replace slot markers with bound values and unescape ``<<``.

    With ``partial=True`` unbound markers are left in place (display use);
    otherwise an unbound marker raises :class:`MissingSlot`.
    """
    out: list[str] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch != "<":
            out.append(ch)
            i += 1
            continue
        if i + 1 < len(text) and text[i + 1] == "<":
            out.append("<")
            i += 2
            continue
        end = text.find(">", i + 1)
        if end == -1:
            # Unclosed bracket in hand-authored text: keep it literally.
            out.append(ch)
            i += 1
            continue
        name = text[i + 1 : end]
        if name in bindings:
            out.append(bindings[name])
        elif partial:
            out.append(text[i : end + 1])
        else:
            raise MissingSlot(name)
        i = end + 1
    return "".join(out)


def bind_text(text: str, bindings: dict[str, str]) -> str:
    """Fully substitute *text*; every marker must be bound."""
    return substitute(text, bindings, partial=False)


def ordered_replacements(bindings: dict[str, str]) -> list[tuple[str, str]]:
    """Validate bindings for genericization and order them longest-first.

    Longer literals are replaced before shorter ones so that a value that
    contains another value as a substring is never shadowed.
    """
    seen: dict[str, str] = {}
    for slot, literal in bindings.items():
        if not literal:
            raise ValueError(f"slot <{slot}> is bound to an empty literal")
        if literal in seen:
            raise AmbiguousLiteral(literal, (seen[literal], slot))
        seen[literal] = slot
    return sorted(((lit, slot) for lit, slot in seen.items()), key=lambda p: (-len(p[0]), p[1]))


def genericize_text(text: str, replacements: list[tuple[str, str]]) -> str:
    """Replace bound literals with slot markers and escape stray ``<``.

    *replacements* must come from :func:`ordered_replacements`.  Matching is
    case-sensitive and exact; already-inserted markers are never rescanned.
    """
    out: list[str] = []
    i = 0
    n = len(text)
    while i < n:
        matched = False
        for literal, slot in replacements:
            if text.startswith(literal, i):
                out.append(f"<{slot}>")
                i += len(literal)
                matched = True
                break
        if matched:
            continue
        ch = text[i]
        if ch == "<":
            out.append("<<")
        else:
            out.append(ch)
        i += 1
    return "".join(out)
