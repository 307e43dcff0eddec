"""Model gateway: prompt templates, interchangeable backends, cassettes.

Every completion request is digested (template, rendered text, image
digests, decode params) so that scripted fixtures and replay cassettes can
address replies content-wise instead of positionally.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable

DEFAULT_CHECK_DECODE = {"temperature": 0.0, "max_tokens": 1024}
DEFAULT_VARIATION_DECODE = {"temperature": 0.7, "max_tokens": 1024}


class GatewayError(Exception):
    pass


class UnknownTemplate(GatewayError):
    pass


class MissingVar(GatewayError):
    pass


class NoScriptMatch(GatewayError):
    """Scripted backend has neither a fixture nor a default rule."""


class DigestMismatch(GatewayError):
    """Replay cassette's next entry does not match the incoming request."""


class BackendUnavailable(GatewayError):
    def __init__(self, message: str, *, retryable: bool = True) -> None:
        super().__init__(message)
        self.retryable = retryable


class Unparseable(GatewayError):
    """Reply text does not start with a yes/no verdict."""


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    required_vars: tuple[str, ...]
    body: str
    accepts_images: bool = False

    def render(self, variables: dict[str, str]) -> str:
        for var in self.required_vars:
            if var not in variables:
                raise MissingVar(f"template {self.name!r} needs variable {var!r}")
        text = self.body
        for var, value in variables.items():
            text = text.replace("{{" + var + "}}", str(value))
        if "{{" in text:
            leftover = re.search(r"\{\{([^}]*)\}\}", text)
            raise MissingVar(
                f"template {self.name!r} still references {{{{{leftover.group(1)}}}}} after rendering"
            )
        return text


_TEMPLATE_SPECS: list[tuple[str, tuple[str, ...], bool]] = [
    ("variation_task_generation", ("task_template", "task_bindings", "site"), False),
    ("condition_check_synthesis", ("skeleton", "failure_events"), False),
    ("fallback_action_synthesis", ("findings", "success_events"), False),
    ("workflow_synthesis", ("skeleton", "checks", "fallbacks"), False),
    ("condition_check_qa", ("check_text", "page_summary"), True),
    ("challenge_identification", ("unit_action", "attempts_digest"), True),
    ("actionable_guidance", ("unit_action", "fallback_texts", "attempts_digest"), False),
    ("guidance_integration", ("guidance_text", "unit_action"), False),
    ("plan_learning", ("task_text", "trace_messages"), False),
    ("judge", ("task_text", "answer"), True),
]


def _load_registry() -> dict[str, PromptTemplate]:
    registry: dict[str, PromptTemplate] = {}
    for name, vars_, images in _TEMPLATE_SPECS:
        body = resources.files("guardweave.prompts").joinpath(f"{name}.txt").read_text("utf-8")
        registry[name] = PromptTemplate(name, vars_, body, accepts_images=images)
    return registry


REGISTRY: dict[str, PromptTemplate] = _load_registry()


def get_template(name: str) -> PromptTemplate:
    try:
        return REGISTRY[name]
    except KeyError:
        raise UnknownTemplate(f"no template named {name!r}") from None


def render(name: str, variables: dict[str, str]) -> str:
    return get_template(name).render(variables)


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.0
    max_tokens: int = 1024


@dataclass(frozen=True)
class ModelRequest:
    template_name: str
    rendered_text: str
    image_refs: tuple[str, ...] = ()
    decode: DecodeParams = field(default_factory=DecodeParams)

    def __post_init__(self) -> None:
        if self.image_refs and not get_template(self.template_name).accepts_images:
            raise ValueError(f"template {self.template_name!r} does not accept images")

    def digest(self) -> str:
        payload = json.dumps(
            {
                "template": self.template_name,
                "text": self.rendered_text,
                "images": list(self.image_refs),
                "decode": {"temperature": self.decode.temperature, "max_tokens": self.decode.max_tokens},
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class BackendKind(str, Enum):
    REMOTE = "remote"
    SCRIPTED = "scripted"
    REPLAY = "replay"


@dataclass(frozen=True)
class ModelReply:
    text: str
    backend: BackendKind
    latency_ms: float = 0.0


DefaultRule = Callable[[ModelRequest], str]


def _default_yes(_: ModelRequest) -> str:
    return "Yes. Scripted default: condition treated as met."


def _default_judge(_: ModelRequest) -> str:
    return "Yes. Scripted default: answer accepted."


SCRIPTED_DEFAULT_RULES: dict[str, DefaultRule] = {
    "condition_check_qa": _default_yes,
    "judge": _default_judge,
}


class ScriptedBackend:
    """Deterministic fixture lookup: exact digest first, then a per-template
    default rule."""

    kind = BackendKind.SCRIPTED

    def __init__(
        self,
        fixtures: dict[str, str] | None = None,
        default_rules: dict[str, DefaultRule] | None = None,
    ) -> None:
        self.fixtures = dict(fixtures or {})
        self.default_rules = dict(SCRIPTED_DEFAULT_RULES)
        if default_rules:
            self.default_rules.update(default_rules)

    def complete(self, request: ModelRequest) -> ModelReply:
        digest = request.digest()
        if digest in self.fixtures:
            return ModelReply(self.fixtures[digest], self.kind)
        rule = self.default_rules.get(request.template_name)
        if rule is None:
            raise NoScriptMatch(
                f"no fixture for digest {digest[:12]}... and no default rule for "
                f"template {request.template_name!r}"
            )
        return ModelReply(rule(request), self.kind)


@dataclass(frozen=True)
class CassetteEntry:
    digest: str
    reply: str


def load_cassette(path: Path | str) -> list[CassetteEntry]:
    entries = []
    for line in Path(path).read_text("utf-8").splitlines():
        if not line.strip():
            continue
        data = json.loads(line)
        entries.append(CassetteEntry(data["digest"], data["reply"]))
    return entries


def save_cassette(path: Path | str, entries: list[CassetteEntry]) -> None:
    lines = [json.dumps({"digest": e.digest, "reply": e.reply}, ensure_ascii=False) for e in entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), "utf-8")


class ReplayBackend:
    """Plays back a recorded cassette in order; drift raises DigestMismatch."""

    kind = BackendKind.REPLAY

    def __init__(self, entries: list[CassetteEntry]) -> None:
        self._entries = list(entries)
        self._cursor = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: Path | str) -> ReplayBackend:
        return cls(load_cassette(path))

    def complete(self, request: ModelRequest) -> ModelReply:
        with self._lock:
            if self._cursor >= len(self._entries):
                raise DigestMismatch("cassette exhausted")
            entry = self._entries[self._cursor]
            if entry.digest != request.digest():
                raise DigestMismatch(
                    f"cassette entry {self._cursor} digest {entry.digest[:12]}... does not match "
                    f"request digest {request.digest()[:12]}..."
                )
            self._cursor += 1
        return ModelReply(entry.reply, self.kind)


class RecordingBackend:
    """Wraps another backend and appends (digest, reply) pairs to a cassette."""

    def __init__(self, inner, path: Path | str) -> None:
        self.inner = inner
        self.kind = inner.kind
        self.path = Path(path)
        self._entries: list[CassetteEntry] = []
        self._lock = threading.Lock()

    def complete(self, request: ModelRequest) -> ModelReply:
        reply = self.inner.complete(request)
        with self._lock:
            self._entries.append(CassetteEntry(request.digest(), reply.text))
            save_cassette(self.path, self._entries)
        return reply


ImageResolver = Callable[[str], bytes]


class RemoteBackend:
    """Chat-completions HTTP backend. Images travel as data URLs."""

    kind = BackendKind.REMOTE

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        *,
        model: str = "default",
        timeout_s: float = 60.0,
        max_in_flight: int = 4,
        image_resolver: ImageResolver | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.timeout_s = timeout_s
        self.image_resolver = image_resolver
        self._slots = threading.Semaphore(max_in_flight)

    def _content(self, request: ModelRequest) -> list[dict]:
        content: list[dict] = [{"type": "text", "text": request.rendered_text}]
        for ref in request.image_refs:
            if self.image_resolver is None:
                raise BackendUnavailable(f"no image resolver for ref {ref}", retryable=False)
            png = self.image_resolver(ref)
            data_url = "data:image/png;base64," + base64.b64encode(png).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": data_url}})
        return content

    def complete(self, request: ModelRequest) -> ModelReply:
        import httpx

        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": self._content(request)}],
            "temperature": request.decode.temperature,
            "max_tokens": request.decode.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        started = time.monotonic()
        with self._slots:
            try:
                response = httpx.post(
                    f"{self.base_url}/chat/completions",
                    json=payload,
                    headers=headers,
                    timeout=self.timeout_s,
                )
            except httpx.HTTPError as exc:
                raise BackendUnavailable(f"model endpoint unreachable: {exc}") from exc
        if response.status_code >= 500:
            raise BackendUnavailable(f"model endpoint returned {response.status_code}")
        if response.status_code >= 400:
            raise BackendUnavailable(
                f"model endpoint rejected request: {response.status_code} {response.text[:200]}",
                retryable=False,
            )
        body = response.json()
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"malformed completion payload: {body!r}", retryable=False) from exc
        return ModelReply(text, self.kind, latency_ms=(time.monotonic() - started) * 1000.0)


class Gateway:
    """Facade: render a template, complete it on the configured backend."""

    def __init__(self, backend) -> None:
        self.backend = backend

    def ask(
        self,
        template_name: str,
        variables: dict[str, str],
        *,
        image_refs: tuple[str, ...] = (),
        decode: DecodeParams | None = None,
    ) -> ModelReply:
        if decode is None:
            base = (
                DEFAULT_VARIATION_DECODE
                if template_name == "variation_task_generation"
                else DEFAULT_CHECK_DECODE
            )
            decode = DecodeParams(**base)
        request = ModelRequest(
            template_name=template_name,
            rendered_text=render(template_name, variables),
            image_refs=image_refs,
            decode=decode,
        )
        return self.backend.complete(request)


_VERDICT = re.compile(r"^(yes|no)\b", re.IGNORECASE)
_SEPARATORS = " \t\r\n.,:;!—–-"


@dataclass(frozen=True)
class YesNo:
    verdict: bool
    explanation: str


def parse_yes_no(text: str) -> YesNo:
    """Verdict from the leading yes/no token; the rest is the explanation."""
    trimmed = text.strip()
    match = _VERDICT.match(trimmed)
    if not match:
        raise Unparseable(f"reply does not start with yes/no: {trimmed[:60]!r}")
    rest = trimmed[match.end() :].lstrip(_SEPARATORS)
    return YesNo(verdict=match.group(1).lower() == "yes", explanation=rest)


_FENCED_JSON = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def extract_json(text: str):
    """Pull the first fenced JSON block (or bare JSON) out of a model reply."""
    match = _FENCED_JSON.search(text)
    candidate = match.group(1) if match else text
    candidate = candidate.strip()
    try:
        return json.loads(candidate)
    except json.JSONDecodeError as exc:
        raise Unparseable(f"no parseable JSON in reply: {exc}") from exc


def make_backend(
    kind: str,
    *,
    model_api_base: str = "",
    model_api_key: str = "",
    cassette_path: str = "",
    fixtures: dict[str, str] | None = None,
    image_resolver: ImageResolver | None = None,
):
    """Build a backend from configuration values (see config.resolve)."""
    backend_kind = BackendKind(kind)
    if backend_kind is BackendKind.SCRIPTED:
        return ScriptedBackend(fixtures)
    if backend_kind is BackendKind.REPLAY:
        if not cassette_path:
            raise GatewayError("replay backend needs a cassette path")
        return ReplayBackend.from_file(cassette_path)
    if not model_api_base:
        raise BackendUnavailable("remote backend needs MODEL_API_BASE", retryable=False)
    return RemoteBackend(model_api_base, model_api_key, image_resolver=image_resolver)
