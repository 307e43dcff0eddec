"""Adapter wire protocol v1: the engine <-> environment boundary.

Newline-delimited JSON over stdio (sidecar mode) or HTTP POST /v1/act
(service mode).  Requests are {op, ...} envelopes; replies are
{ok: true, ...} or {ok: false, error: {kind, message}}.  The same message
dispatcher backs both transports, and any conformant adapter process can sit
on the other side of the pipe.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import threading
from typing import Callable, Iterable, Protocol, TextIO

from .actions import ActionCommand
from .env import (
    ActionOutcome,
    AdapterUnavailable,
    Env,
    EnvProtocolError,
    OutcomeStatus,
    PageSnapshot,
    Role,
    SessionClosed,
)
from .simweb import ElementDef, PageDef, SimGoal, SimSiteDef, SimWeb

PROTO_VERSION = 1
CAPABILITIES = ("reset", "act", "snapshot")

ERROR_UNSUPPORTED = "unsupported"
ERROR_BAD_REQUEST = "bad_request"
ERROR_SESSION = "session"
ERROR_INTERNAL = "internal"


def _error(kind: str, message: str) -> dict:
    return {"ok": False, "error": {"kind": kind, "message": message}}


def outcome_to_wire(outcome: ActionOutcome) -> dict:
    data = {
        "status": outcome.status.value,
        "message": outcome.message,
        "after": outcome.after.to_json(),
    }
    if outcome.overlay_id:
        data["overlay_id"] = outcome.overlay_id
    return data


def outcome_from_wire(data: dict) -> ActionOutcome:
    try:
        return ActionOutcome(
            status=OutcomeStatus(data["status"]),
            message=data["message"],
            after=PageSnapshot.from_json(data["after"]),
            overlay_id=data.get("overlay_id", ""),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise EnvProtocolError(f"malformed outcome: {exc}") from exc


def conformance_site() -> SimSiteDef:
    """The fixed single-page site behind the shared conformance transcripts.

    Any adapter (simulated or browser-backed) that can present this page and
    answer the golden transcript byte-for-byte is protocol-conformant.
    """
    page = PageDef(
        name="conformance",
        title="Conformance",
        elements=(
            ElementDef("greeting", Role.TEXT, "greeting", text="hello there"),
            ElementDef("logo", Role.IMAGE, "logo"),
            ElementDef("name", Role.TEXTBOX, "Name"),
            ElementDef("color", Role.SELECT, "Color", options=("red", "blue")),
            ElementDef("more", Role.LINK, "More info"),
            ElementDef("go", Role.BUTTON, "Go"),
        ),
    )
    return SimSiteDef(
        site_id="conformance",
        entry_page="conformance",
        pages=(page,),
        transitions=(),
        goal=SimGoal(predicates=(), answer_required=False),
    )


class AdapterServer:
    """Transport-agnostic dispatcher for one adapter session."""

    def __init__(self, env: Env) -> None:
        self._env = env
        self._started = False
        self._closed = False
        self._lock = threading.Lock()

    def handle(self, message: object) -> dict:
        with self._lock:
            return self._handle_locked(message)

    def _handle_locked(self, message: object) -> dict:
        if not isinstance(message, dict):
            return _error(ERROR_BAD_REQUEST, "message must be a JSON object")
        op = message.get("op")
        if op == "hello":
            return {"ok": True, "proto": PROTO_VERSION, "capabilities": list(CAPABILITIES)}
        if self._closed:
            return _error(ERROR_SESSION, "session closed")
        if op == "reset":
            seed = message.get("seed")
            if not isinstance(seed, int) or isinstance(seed, bool):
                return _error(ERROR_BAD_REQUEST, 'missing field "seed"')
            return self._guard(lambda: {"ok": True, "snapshot": self._reset(seed)})
        if op == "act":
            if "cmd" not in message:
                return _error(ERROR_BAD_REQUEST, 'missing field "cmd"')
            try:
                command = ActionCommand.from_json(message["cmd"])
            except (KeyError, ValueError, TypeError, AttributeError) as exc:
                return _error(ERROR_BAD_REQUEST, f"invalid command: {exc}")
            if not self._started:
                return _error(ERROR_SESSION, "session not started")
            return self._guard(lambda: {"ok": True, "outcome": outcome_to_wire(self._env.apply(command))})
        if op == "snapshot":
            if not self._started:
                return _error(ERROR_SESSION, "session not started")
            return self._guard(lambda: {"ok": True, "snapshot": self._env.snapshot().to_json()})
        if op == "bye":
            self._closed = True
            try:
                self._env.close()
            except Exception:  # noqa: BLE001 - closing must never fail the reply
                pass
            return {"ok": True}
        return _error(ERROR_UNSUPPORTED, f'unknown op "{op}"')

    def _reset(self, seed: int) -> dict:
        snapshot = self._env.reset(seed)
        self._started = True
        return snapshot.to_json()

    def _guard(self, fn: Callable[[], dict]) -> dict:
        try:
            return fn()
        except SessionClosed as exc:
            return _error(ERROR_SESSION, str(exc))
        except Exception as exc:  # noqa: BLE001 - protocol servers must not crash
            return _error(ERROR_INTERNAL, f"{type(exc).__name__}: {exc}")

    @property
    def closed(self) -> bool:
        return self._closed


def encode_reply(reply: dict) -> str:
    return json.dumps(reply, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def serve_stdio(env: Env, stdin: TextIO | Iterable[str] | None = None, stdout: TextIO | None = None) -> None:
    """Run the NDJSON request/reply loop until `bye` or end of input."""
    stdin = sys.stdin if stdin is None else stdin
    stdout = sys.stdout if stdout is None else stdout
    server = AdapterServer(env)
    for raw in stdin:
        line = raw.strip()
        if not line:
            continue
        try:
            message: object = json.loads(line)
        except json.JSONDecodeError:
            reply = _error(ERROR_BAD_REQUEST, "invalid JSON")
        else:
            reply = server.handle(message)
        stdout.write(encode_reply(reply) + "\n")
        stdout.flush()
        if server.closed:
            break


class Transport(Protocol):
    """One request/reply exchange with an adapter."""

    def send(self, message: dict) -> dict: ...

    def close(self) -> None: ...


class LoopbackTransport:
    """In-process transport straight into an AdapterServer."""

    def __init__(self, server: AdapterServer) -> None:
        self.server = server

    def send(self, message: dict) -> dict:
        return self.server.handle(message)

    def close(self) -> None:
        pass


class StdioTransport:
    """Adapter subprocess speaking NDJSON on its stdio."""

    def __init__(self, argv: list[str]) -> None:
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
            )
        except OSError as exc:
            raise AdapterUnavailable(f"cannot start adapter process: {exc}") from exc
        self._lock = threading.Lock()

    def send(self, message: dict) -> dict:
        with self._lock:
            if self._proc.poll() is not None:
                raise AdapterUnavailable("adapter process has exited")
            try:
                assert self._proc.stdin is not None and self._proc.stdout is not None
                self._proc.stdin.write(json.dumps(message, ensure_ascii=False) + "\n")
                self._proc.stdin.flush()
                line = self._proc.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                raise AdapterUnavailable(f"adapter pipe broke: {exc}") from exc
            if not line:
                raise AdapterUnavailable("adapter closed its output stream")
            try:
                reply = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EnvProtocolError(f"adapter wrote invalid JSON: {line!r}") from exc
            if not isinstance(reply, dict):
                raise EnvProtocolError("adapter reply is not a JSON object")
            return reply

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()


class HttpTransport:
    """Adapter behind HTTP POST {base_url}/v1/act (service mode)."""

    def __init__(self, base_url: str, *, client=None) -> None:
        import httpx

        self._url = base_url.rstrip("/") + "/v1/act"
        self._client = client or httpx.Client(timeout=30.0)
        self._httpx = httpx

    def send(self, message: dict) -> dict:
        try:
            response = self._client.post(self._url, json=message)
        except self._httpx.HTTPError as exc:
            raise AdapterUnavailable(f"adapter endpoint unreachable: {exc}") from exc
        try:
            reply = response.json()
        except ValueError as exc:
            raise EnvProtocolError(f"adapter returned non-JSON (HTTP {response.status_code})") from exc
        if not isinstance(reply, dict):
            raise EnvProtocolError("adapter reply is not a JSON object")
        return reply

    def close(self) -> None:
        self._client.close()


class ExternalAdapterEnv:
    """Env implementation that proxies every call across a Transport."""

    def __init__(self, transport: Transport, *, handshake: bool = True) -> None:
        self._transport = transport
        self._closed = False
        if handshake:
            reply = self._call({"op": "hello", "proto": PROTO_VERSION, "capabilities": []})
            if reply.get("proto") != PROTO_VERSION:
                raise EnvProtocolError(f"adapter speaks proto {reply.get('proto')!r}, need {PROTO_VERSION}")

    def _call(self, message: dict) -> dict:
        reply = self._transport.send(message)
        if "ok" not in reply:
            raise EnvProtocolError(f"reply missing 'ok' field: {reply!r}")
        if reply["ok"]:
            return reply
        error = reply.get("error") or {}
        kind = error.get("kind", ERROR_INTERNAL)
        message_text = error.get("message", "unknown adapter error")
        if kind == ERROR_SESSION:
            raise SessionClosed(message_text)
        raise EnvProtocolError(f"{kind}: {message_text}")

    def _field(self, reply: dict, key: str) -> dict:
        value = reply.get(key)
        if not isinstance(value, dict):
            raise EnvProtocolError(f"reply missing {key!r} payload")
        return value

    def reset(self, seed: int) -> PageSnapshot:
        reply = self._call({"op": "reset", "seed": seed})
        try:
            return PageSnapshot.from_json(self._field(reply, "snapshot"))
        except (KeyError, ValueError, TypeError) as exc:
            raise EnvProtocolError(f"malformed snapshot: {exc}") from exc

    def apply(self, command: ActionCommand) -> ActionOutcome:
        reply = self._call({"op": "act", "cmd": command.to_json()})
        return outcome_from_wire(self._field(reply, "outcome"))

    def snapshot(self) -> PageSnapshot:
        reply = self._call({"op": "snapshot"})
        try:
            return PageSnapshot.from_json(self._field(reply, "snapshot"))
        except (KeyError, ValueError, TypeError) as exc:
            raise EnvProtocolError(f"malformed snapshot: {exc}") from exc

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._transport.send({"op": "bye"})
        except (AdapterUnavailable, EnvProtocolError):
            pass
        self._transport.close()


def env_from_spec(spec: str, bindings: dict[str, str] | None = None):
    """Build an environment from a spec string: `sim:<site>` opens the
    built-in simulator, `adapter:<http-address>` dials an external adapter."""
    kind, _, rest = spec.partition(":")
    if kind == "sim" and rest:
        from .sites import SITES

        if rest != "conformance" and rest not in SITES:
            raise ValueError(f"unknown sim site {rest!r}; known: {', '.join(sorted(SITES))}")
        return open_sim_env(rest, dict(bindings) if bindings else None)
    if kind == "adapter" and rest:
        if not rest.startswith(("http://", "https://")):
            raise ValueError(f"adapter environment needs an http(s) address, got {rest!r}")
        return ExternalAdapterEnv(HttpTransport(rest))
    raise ValueError(f"environment spec must be sim:<site> or adapter:<addr>, got {spec!r}")


def open_sim_env(site_id: str, bindings: dict[str, str] | None = None) -> SimWeb:
    """Build the SimWeb session an adapter serves for `site_id`."""
    if site_id == "conformance":
        return SimWeb(conformance_site(), bindings or {})
    from .sites import SITES, default_task, FAMILY_SITES

    site = SITES[site_id]
    if bindings is None:
        family = next(fam for fam, ids in FAMILY_SITES.items() if site_id in ids)
        bindings = dict(default_task(family).bindings)
        bindings["website"] = site_id
    return SimWeb(site, bindings)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="guardweave-adapter",
        description="Serve a simulated site over the adapter wire protocol on stdio.",
    )
    parser.add_argument("--site", default="conformance", help="site id to serve")
    args = parser.parse_args(argv)
    serve_stdio(open_sim_env(args.site))
    return 0


if __name__ == "__main__":
    sys.exit(main())
