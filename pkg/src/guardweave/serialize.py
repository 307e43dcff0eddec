"""Workflow document file format: canonical JSON with round-trip guarantees.

Unknown fields anywhere in the document survive a parse/serialize cycle so
that files written by newer tools are not destroyed by older ones.
"""

from __future__ import annotations

import json
from typing import Any

from .actions import command_to_wire, commands_from_wire
from .model import (
    WORKFLOW_SCHEMA,
    ConditionCheck,
    FallbackAction,
    Origin,
    Phase,
    Predicate,
    Provenance,
    StepUnit,
    WorkflowDoc,
)


class ParseError(ValueError):
    """Input is not a well-formed workflow document."""

    def __init__(self, message: str, *, offset: int = -1, path: str = "") -> None:
        where = []
        if path:
            where.append(f"at {path}")
        if offset >= 0:
            where.append(f"byte {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")
        self.offset = offset
        self.path = path


_CHECK_FIELDS = {"check_id", "phase", "nl_text", "predicate", "origin"}
_FALLBACK_FIELDS = {"fallback_id", "rank", "nl_text", "command", "origin"}
_UNIT_FIELDS = {"index", "action_text", "pre_checks", "post_checks", "fallbacks"}
_DOC_FIELDS = {"schema", "workflow_id", "family_id", "version", "units", "provenance"}


def _check_to_json(check: ConditionCheck) -> dict:
    out: dict = {
        "check_id": check.check_id,
        "phase": check.phase.value,
        "nl_text": check.nl_text,
        "origin": check.origin.value,
    }
    if check.predicate is not None:
        out["predicate"] = check.predicate.to_json()
    out.update(check.extra)
    return out


def _fallback_to_json(fb: FallbackAction) -> dict:
    out: dict = {
        "fallback_id": fb.fallback_id,
        "rank": fb.rank,
        "nl_text": fb.nl_text,
        "origin": fb.origin.value,
    }
    wire = command_to_wire(fb.commands)
    if wire is not None:
        out["command"] = wire
    out.update(fb.extra)
    return out


def to_json_dict(doc: WorkflowDoc) -> dict:
    out: dict = {
        "schema": WORKFLOW_SCHEMA,
        "workflow_id": doc.workflow_id,
        "family_id": doc.family_id,
        "version": doc.version,
        "units": [
            {
                "index": unit.index,
                "action_text": unit.action_text,
                "pre_checks": [_check_to_json(c) for c in unit.pre_checks],
                "post_checks": [_check_to_json(c) for c in unit.post_checks],
                "fallbacks": [_fallback_to_json(f) for f in unit.fallbacks],
                **unit.extra,
            }
            for unit in doc.units
        ],
        "provenance": doc.provenance.to_json(),
    }
    out.update(doc.extra)
    return out


def serialize(doc: WorkflowDoc) -> bytes:
    """Canonical UTF-8 JSON bytes: sorted keys, stable separators, newline."""
    text = json.dumps(to_json_dict(doc), sort_keys=True, ensure_ascii=False, indent=2)
    return (text + "\n").encode("utf-8")


def _require(data: dict, key: str, kind: type, path: str) -> Any:
    if key not in data:
        raise ParseError(f"missing required field {key!r}", path=path)
    value = data[key]
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ParseError(f"field {key!r} must be an integer", path=f"{path}.{key}")
    elif not isinstance(value, kind):
        raise ParseError(f"field {key!r} must be {kind.__name__}", path=f"{path}.{key}")
    return value


def _parse_check(data: dict, path: str) -> ConditionCheck:
    if not isinstance(data, dict):
        raise ParseError("check must be an object", path=path)
    predicate = None
    if data.get("predicate") is not None:
        try:
            predicate = Predicate.from_json(data["predicate"])
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad predicate: {exc}", path=f"{path}.predicate") from exc
    try:
        phase = Phase(_require(data, "phase", str, path))
        origin = Origin(data.get("origin", Origin.SYNTHESIZED.value))
    except ValueError as exc:
        raise ParseError(str(exc), path=path) from exc
    return ConditionCheck(
        check_id=_require(data, "check_id", str, path),
        phase=phase,
        nl_text=_require(data, "nl_text", str, path),
        predicate=predicate,
        origin=origin,
        extra={k: v for k, v in data.items() if k not in _CHECK_FIELDS},
    )


def _parse_fallback(data: dict, path: str) -> FallbackAction:
    if not isinstance(data, dict):
        raise ParseError("fallback must be an object", path=path)
    try:
        commands = commands_from_wire(data.get("command"))
        origin = Origin(data.get("origin", Origin.SYNTHESIZED.value))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad fallback: {exc}", path=path) from exc
    return FallbackAction(
        fallback_id=_require(data, "fallback_id", str, path),
        rank=_require(data, "rank", int, path),
        nl_text=_require(data, "nl_text", str, path),
        commands=commands,
        origin=origin,
        extra={k: v for k, v in data.items() if k not in _FALLBACK_FIELDS},
    )


def _parse_unit(data: dict, path: str) -> StepUnit:
    if not isinstance(data, dict):
        raise ParseError("unit must be an object", path=path)
    for key in ("pre_checks", "post_checks", "fallbacks"):
        if key in data and not isinstance(data[key], list):
            raise ParseError(f"field {key!r} must be a list", path=f"{path}.{key}")
    return StepUnit(
        index=_require(data, "index", int, path),
        action_text=_require(data, "action_text", str, path),
        pre_checks=tuple(
            _parse_check(c, f"{path}.pre_checks[{i}]") for i, c in enumerate(data.get("pre_checks", []))
        ),
        post_checks=tuple(
            _parse_check(c, f"{path}.post_checks[{i}]") for i, c in enumerate(data.get("post_checks", []))
        ),
        fallbacks=tuple(
            _parse_fallback(f, f"{path}.fallbacks[{i}]") for i, f in enumerate(data.get("fallbacks", []))
        ),
        extra={k: v for k, v in data.items() if k not in _UNIT_FIELDS},
    )


def from_json_dict(data: dict) -> WorkflowDoc:
    if not isinstance(data, dict):
        raise ParseError("document root must be an object")
    schema = data.get("schema")
    if schema != WORKFLOW_SCHEMA:
        raise ParseError(f"unsupported schema {schema!r}, expected {WORKFLOW_SCHEMA!r}", path="schema")
    units_raw = _require(data, "units", list, "")
    return WorkflowDoc(
        workflow_id=_require(data, "workflow_id", str, ""),
        family_id=_require(data, "family_id", str, ""),
        version=_require(data, "version", int, ""),
        units=tuple(_parse_unit(u, f"units[{i}]") for i, u in enumerate(units_raw)),
        provenance=Provenance.from_json(data.get("provenance", {})),
        extra={k: v for k, v in data.items() if k not in _DOC_FIELDS},
    )


def parse(raw: bytes | str) -> WorkflowDoc:
    """Parse workflow JSON; malformed input raises ParseError with position."""
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not valid UTF-8: {exc}", offset=exc.start) from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", offset=exc.pos) from exc
    return from_json_dict(data)
