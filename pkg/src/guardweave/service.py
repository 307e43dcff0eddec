"""HTTP boundary over the stores, the explorer, the synthesizer, and the
guarded runtime.

Every endpoint is a thin delegation to a module operation; the only logic
that lives here is plumbing: JSON in/out, error-to-status mapping, one
writer per run, and the JSON-lines event stream a console can follow live
and resume with `?after=<sequence>`.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field, replace

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, StreamingResponse
from starlette.concurrency import run_in_threadpool
from starlette.exceptions import HTTPException as StarletteHTTPException

from .config import Config
from .explorer import ExplorationConfig, NoVariableSlots, explore_family
from .gateway import Gateway, GatewayError, make_backend
from .metrics import oracle_judge
from .model import TaskSpec, bind, validate_workflow
from .protocol import env_from_spec
from .runtime import (
    Checkpoint,
    NotAwaitingGuidance,
    RunPolicy,
    StaleCheckpoint,
    VersionUnchanged,
    append_run_event,
    integrate_guidance,
    resume,
    run_guarded,
)
from .serialize import serialize
from .sites import default_task, site_for_task
from .store import Store, StoreError
from .synth import NoSuccessfulRun, synth_family

STREAM_POLL_SECONDS = 0.05


class RequestProblem(ValueError):
    """The request body is missing or malforms a required field."""


@dataclass
class _RunHandle:
    """Server-side bookkeeping for one run: its writer lock, the thread
    currently driving it (if any), and any crash it suffered."""

    lock: threading.Lock = field(default_factory=threading.Lock)
    thread: threading.Thread | None = None
    error: str = ""


_ERROR_STATUS: dict[type[Exception], int] = {
    RequestProblem: 422,
    NotAwaitingGuidance: 409,
    VersionUnchanged: 409,
    StaleCheckpoint: 409,
    NoSuccessfulRun: 409,
    StoreError: 404,
    KeyError: 404,
    NoVariableSlots: 422,
    IndexError: 422,
    GatewayError: 422,
    ValueError: 422,
}


def _error_body(kind: str, message: str) -> dict:
    return {"error": {"kind": kind, "message": message}}


def create_app(
    config: Config | None = None,
    *,
    store: Store | None = None,
    gateway: Gateway | None = None,
) -> FastAPI:
    """Assemble the service around one store and one model gateway."""
    config = config or Config()
    store = store or Store(config.store_path)
    if gateway is not None:
        # An injected gateway is deliberate (tests, fixtures): use it everywhere.
        model_gateway = gateway
    else:
        gateway = Gateway(
            make_backend(config.backend, model_api_base=config.model_api_base)
        )
        # The scripted backend is a test double with no fixtures here; the
        # deterministic sim-mode paths (gateway=None) are the real default.
        model_gateway = gateway if config.backend in ("remote", "replay") else None

    app = FastAPI(title="guardweave", version="1")
    app.state.config = config
    app.state.store = store
    app.state.gateway = gateway
    registry: dict[str, _RunHandle] = {}
    registry_lock = threading.Lock()

    def handle_for(run_id: str) -> _RunHandle:
        with registry_lock:
            return registry.setdefault(run_id, _RunHandle())

    async def domain_error(request: Request, exc: Exception):
        status = next(
            s for t, s in _ERROR_STATUS.items() if isinstance(exc, t)
        )
        message = str(exc) or type(exc).__name__
        if isinstance(exc, KeyError):
            message = f"unknown id {exc.args[0]!r}" if exc.args else "unknown id"
        return JSONResponse(_error_body(type(exc).__name__, message), status_code=status)

    for exc_type in _ERROR_STATUS:
        app.add_exception_handler(exc_type, domain_error)

    @app.exception_handler(RequestValidationError)
    async def invalid_request(request: Request, exc: RequestValidationError):
        return JSONResponse(_error_body("ValidationError", str(exc)), status_code=422)

    @app.exception_handler(StarletteHTTPException)
    async def http_error(request: Request, exc: StarletteHTTPException):
        return JSONResponse(
            _error_body("HTTPError", str(exc.detail)), status_code=exc.status_code
        )

    def _field(body: dict, name: str, kind: type, *, default=None, required: bool = False):
        value = body.get(name, default)
        if value is None:
            if required:
                raise RequestProblem(f"body needs {name!r}")
            return default
        if kind is int and isinstance(value, bool) or not isinstance(value, kind):
            raise RequestProblem(f"{name!r} must be a {kind.__name__}")
        return value

    async def _json_object(request: Request, *, optional: bool = False) -> dict:
        raw = await request.body()
        if not raw:
            if optional:
                return {}
            raise RequestProblem("request needs a JSON object body")
        try:
            body = json.loads(raw)
        except ValueError as exc:
            raise RequestProblem(f"body is not valid JSON: {exc}") from exc
        if not isinstance(body, dict):
            raise RequestProblem("body must be a JSON object")
        return body

    # -- families -----------------------------------------------------------------

    @app.post("/v1/families")
    async def create_family(request: Request):
        body = await _json_object(request)
        data = _field(body, "task", dict, required=True)
        try:
            task = TaskSpec.from_json(data)
        except (KeyError, TypeError) as exc:
            raise RequestProblem(f"malformed task: {exc}") from exc
        problems = task.validate()
        if problems:
            raise RequestProblem(f"invalid task: {problems[0]}")
        store.save_task(task)
        return {"family_id": task.family_id}

    @app.post("/v1/families/{family_id}/explore")
    async def explore(family_id: str, request: Request):
        body = await _json_object(request, optional=True)
        task = store.load_task(family_id)
        exploration = ExplorationConfig(
            runs_per_task=_field(body, "runs", int, default=5),
            max_steps_per_run=_field(body, "max_steps", int, default=60),
            parallelism=_field(body, "parallel", int, default=config.parallelism),
            base_seed=_field(body, "seed", int, default=1337),
        )
        ledger = await run_in_threadpool(
            explore_family,
            task,
            exploration,
            store,
            judge=oracle_judge,
            gateway=model_gateway,
        )
        return {
            "family_id": family_id,
            "tasks": len(ledger.rows),
            "runs": sum(row.total for row in ledger.rows),
            "successes": len(ledger.successful_traces),
            "ledger_path": str(store.family_dir(family_id) / "ledger.json"),
        }

    @app.post("/v1/families/{family_id}/synthesize")
    async def synthesize(family_id: str):
        ledger = store.load_ledger(family_id)
        doc = synth_family(ledger, store, gateway=model_gateway)
        return {"workflow_id": doc.workflow_id, "version": doc.version, "units": len(doc.units)}

    # -- workflows ----------------------------------------------------------------

    @app.get("/v1/workflows/{workflow_id}")
    async def get_workflow(workflow_id: str, version: int | None = None):
        doc = store.load_workflow(workflow_id, version)
        return json.loads(serialize(doc))

    # -- runs ---------------------------------------------------------------------

    def _task_for_family(family_id: str) -> TaskSpec | None:
        try:
            return store.load_task(family_id)
        except StoreError:
            try:
                return default_task(family_id)
            except KeyError:
                return None

    @app.post("/v1/runs")
    async def start_run(request: Request):
        body = await _json_object(request)
        workflow_id = _field(body, "workflow_id", str, required=True)
        doc = store.load_workflow(workflow_id, _field(body, "version", int, default=None))
        policy_data = _field(body, "policy", dict, default=None)
        policy = RunPolicy()
        if policy_data:
            defaults = policy.to_json()
            unknown = sorted(set(policy_data) - set(defaults))
            if unknown:
                raise RequestProblem(f"unknown policy keys: {', '.join(unknown)}")
            try:
                policy = RunPolicy.from_json({**defaults, **policy_data})
            except (TypeError, ValueError) as exc:
                raise RequestProblem(f"malformed policy: {exc}") from exc
        seed = _field(body, "seed", int, default=0)
        given = _field(body, "bindings", dict, default={})

        task = _task_for_family(doc.family_id)
        bindings = {**(task.bindings if task else {}), **given}
        violations = validate_workflow(bind(doc, bindings))
        if violations:
            raise RequestProblem(f"workflow does not bind cleanly: {violations[0]}")

        env_spec = _field(body, "env", str, default=None)
        if env_spec is None:
            if task is None:
                raise RequestProblem(
                    f"family {doc.family_id!r} has no registered task; pass an explicit 'env'"
                )
            env_spec = f"sim:{site_for_task(replace(task, bindings=bindings)).site_id}"
        environment = env_from_spec(env_spec, bindings)

        run_id = _field(body, "run_id", str, default="") or f"run-{uuid.uuid4().hex[:12]}"
        with registry_lock:
            if run_id in registry or store.run_state_dir(run_id).exists():
                environment.close()
                return JSONResponse(
                    _error_body("DuplicateRun", f"run {run_id} already exists"),
                    status_code=409,
                )
            handle = registry.setdefault(run_id, _RunHandle())

        def execute():
            try:
                run_guarded(
                    doc, bindings, environment, policy,
                    seed=seed, run_id=run_id, store=store, gateway=model_gateway,
                )
            except Exception as exc:
                handle.error = f"{type(exc).__name__}: {exc}"
            finally:
                environment.close()

        handle.thread = threading.Thread(target=execute, name=f"run-{run_id}", daemon=True)
        handle.thread.start()
        return {"run_id": run_id, "workflow_id": workflow_id, "state": "running"}

    @app.get("/v1/runs/{run_id}")
    async def run_state(run_id: str):
        handle = registry.get(run_id)
        out: dict = {"run_id": run_id}
        if handle and handle.error:
            out["error"] = handle.error
        try:
            report = store.load_run_report(run_id)
            out.update(state=report["outcome"], report=report)
            return out
        except StoreError:
            pass
        try:
            checkpoint = store.load_checkpoint(run_id)
        except StoreError:
            if handle is None:
                raise StoreError(f"no run {run_id}") from None
            out["state"] = "aborted" if handle.error else "running"
            return out
        out.update(
            state=checkpoint["state"],
            workflow_id=checkpoint["workflow_id"],
            workflow_version=checkpoint["workflow_version"],
            unit_index=checkpoint["unit_index"],
        )
        return out

    @app.get("/v1/runs/{run_id}/notification")
    async def run_notification(run_id: str):
        return store.load_notification(run_id)

    @app.get("/v1/runs/{run_id}/events")
    async def run_events(run_id: str, after: int = 0):
        known = (
            run_id in registry
            or store.run_state_dir(run_id).exists()
        )
        if not known:
            raise StoreError(f"no run {run_id}")

        def is_live() -> bool:
            handle = registry.get(run_id)
            if handle and handle.thread and handle.thread.is_alive():
                return True
            try:
                return store.load_checkpoint(run_id)["state"] == "awaiting_guidance"
            except StoreError:
                return handle is not None and not handle.error

        def stream():
            cursor = after
            while True:
                events = store.read_events(run_id, after=cursor)
                for event in events:
                    cursor = event["sequence"]
                    yield json.dumps(event, sort_keys=True, ensure_ascii=False) + "\n"
                    if event["kind"] == "Finished":
                        return
                if not events and not is_live():
                    return
                if not events:
                    time.sleep(STREAM_POLL_SECONDS)

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    @app.post("/v1/runs/{run_id}/guidance")
    async def submit_guidance(run_id: str, request: Request):
        body = await _json_object(request)
        text = _field(body, "text", str, required=True)
        if not text.strip():
            raise RequestProblem("guidance text is empty")
        handle = handle_for(run_id)
        with handle.lock:
            checkpoint = Checkpoint.from_json(store.load_checkpoint(run_id))
            if not checkpoint.resumable:
                raise NotAwaitingGuidance(f"run {run_id} is not paused for guidance")
            target_unit = _field(body, "target_unit", int, default=checkpoint.unit_index)
            workflow = store.load_workflow(checkpoint.workflow_id)
            updated, note = integrate_guidance(
                workflow, text, target_unit, model_gateway, run_id=run_id
            )
            store.save_workflow(updated)
            append_run_event(
                store, run_id, "GuidanceApplied",
                version=updated.version, note_id=note.note_id, target_unit=target_unit,
            )
            resumed = False
            if config.auto_resume:
                def continue_run():
                    try:
                        resume(checkpoint, updated, store=store, gateway=model_gateway)
                    except Exception as exc:
                        handle.error = f"{type(exc).__name__}: {exc}"

                handle.thread = threading.Thread(
                    target=continue_run, name=f"resume-{run_id}", daemon=True
                )
                handle.thread.start()
                resumed = True
        return {
            "run_id": run_id,
            "workflow_id": updated.workflow_id,
            "version": updated.version,
            "note_id": note.note_id,
            "resumed": resumed,
        }

    # -- reports ------------------------------------------------------------------

    @app.get("/v1/reports/{bench_id}")
    async def bench_summary(bench_id: str):
        return store.load_bench_report(bench_id)

    return app


def serve(config: Config | None = None) -> None:
    """Run the service until interrupted (store directory must be writable)."""
    import uvicorn

    config = config or Config()
    uvicorn.run(create_app(config), host="127.0.0.1", port=config.port, log_level="info")
