"""Guarded workflow execution.

A run walks the workflow's units as a state machine: evaluate the unit's
pre-checks, perform its action clauses, evaluate its post-checks, move on.
Any failed check or action starts a bounded retry loop — each retry first
executes the next-ranked fallback, then re-attempts the whole unit.  When
the budget runs out the run pauses: a checkpoint and a four-part
notification (where, why, what happened, how to help) are persisted so a
person can inject guidance, after which the run resumes from the paused
unit with a fresh budget and the updated guards.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum

from .actions import ActionCommand, ClauseError, CommandKind, describe, parse_action_text
from .env import (
    AdapterUnavailable,
    Env,
    PageSnapshot,
    evaluate_predicate,
    ground_command,
    render_layout_text,
)
from .gateway import Gateway, GatewayError, Unparseable, parse_yes_no
from .model import (
    ConditionCheck,
    FallbackAction,
    GuidanceNote,
    Origin,
    Phase,
    Predicate,
    PredicateKind,
    Provenance,
    StepUnit,
    WorkflowDoc,
    bind,
    content_id,
    validate_workflow,
)
from .simweb import SessionClosed
from .store import Store


class CheckMode(str, Enum):
    PREDICATE_FIRST = "predicate_first"
    MODEL_ONLY = "model_only"


class EvaluatedBy(str, Enum):
    PREDICATE = "predicate"
    MODEL_QA = "model_qa"


class RunOutcome(str, Enum):
    COMPLETED = "completed"
    FAILED_AFTER_GUIDANCE_DECLINED = "failed_after_guidance_declined"
    ABORTED = "aborted"


class MachineState(str, Enum):
    RUNNING = "running"
    AWAITING_GUIDANCE = "awaiting_guidance"
    COMPLETED = "completed"
    ABORTED = "aborted"


class NotAwaitingGuidance(RuntimeError):
    """Only a paused run can resume."""


class VersionUnchanged(RuntimeError):
    """Resuming without new guidance would repeat the exact failed loop."""


class StaleCheckpoint(RuntimeError):
    """The checkpointed session cannot be restored."""


@dataclass(frozen=True)
class RunPolicy:
    max_retries: int = 3
    check_mode: CheckMode = CheckMode.PREDICATE_FIRST
    pause_on_exhaustion: bool = True

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def to_json(self) -> dict:
        return {
            "max_retries": self.max_retries,
            "check_mode": self.check_mode.value,
            "pause_on_exhaustion": self.pause_on_exhaustion,
        }

    @classmethod
    def from_json(cls, data: dict) -> RunPolicy:
        return cls(
            max_retries=data["max_retries"],
            check_mode=CheckMode(data["check_mode"]),
            pause_on_exhaustion=data["pause_on_exhaustion"],
        )


@dataclass(frozen=True)
class CheckVerdict:
    check_id: str
    passed: bool
    explanation: str
    evidence_ref: str
    evaluated_by: EvaluatedBy

    def __post_init__(self) -> None:
        if not self.passed and not self.explanation:
            raise ValueError("a failed verdict must explain itself")

    def to_json(self) -> dict:
        return {
            "check_id": self.check_id,
            "passed": self.passed,
            "explanation": self.explanation,
            "evidence_ref": self.evidence_ref,
            "evaluated_by": self.evaluated_by.value,
        }


@dataclass(frozen=True)
class AttemptLog:
    """One attempt at a unit: the checks it ran, how far the action got."""

    verdicts: tuple[CheckVerdict, ...]
    action_status: str  # "" if the action was never reached
    action_message: str
    snapshot_ref: str  # page state when the attempt ended
    prelude: tuple[str, ...] = ()  # fallback activity run just before this attempt
    failed_check_id: str = ""
    failed_action: str = ""

    @property
    def ok(self) -> bool:
        return not self.failed_check_id and not self.failed_action

    def to_json(self) -> dict:
        return {
            "verdicts": [v.to_json() for v in self.verdicts],
            "action_status": self.action_status,
            "action_message": self.action_message,
            "snapshot_ref": self.snapshot_ref,
            "prelude": list(self.prelude),
            "failed_check_id": self.failed_check_id,
            "failed_action": self.failed_action,
        }


@dataclass(frozen=True)
class UnitLog:
    unit_index: int
    attempts: tuple[AttemptLog, ...]

    @property
    def retries(self) -> int:
        return len(self.attempts) - 1

    def to_json(self) -> dict:
        return {
            "unit_index": self.unit_index,
            "attempts": [a.to_json() for a in self.attempts],
        }


@dataclass(frozen=True)
class RunReport:
    run_id: str
    outcome: RunOutcome
    unit_logs: tuple[UnitLog, ...]
    answer: str
    final_snapshot_refs: tuple[str, ...]
    workflow_id: str = ""
    workflow_version: int = 0

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "outcome": self.outcome.value,
            "unit_logs": [u.to_json() for u in self.unit_logs],
            "answer": self.answer,
            "final_snapshot_refs": list(self.final_snapshot_refs),
            "workflow_id": self.workflow_id,
            "workflow_version": self.workflow_version,
        }


@dataclass(frozen=True)
class UserNotification:
    run_id: str
    where: str
    why: str
    what: str
    how: str
    attempts: tuple[str, ...]  # evidence refs, one per attempt

    def __post_init__(self) -> None:
        for name in ("where", "why", "what", "how"):
            if not getattr(self, name):
                raise ValueError(f"notification field {name!r} must not be empty")

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "where": self.where,
            "why": self.why,
            "what": self.what,
            "how": self.how,
            "attempts": list(self.attempts),
        }


@dataclass(frozen=True)
class Checkpoint:
    run_id: str
    workflow_id: str
    workflow_version: int
    unit_index: int
    state: MachineState
    bindings: dict
    session_ref: dict
    clock: int
    policy: RunPolicy = field(default_factory=RunPolicy)
    unit_logs: tuple[UnitLog, ...] = ()
    answer: str = ""
    seed: int = 0

    @property
    def resumable(self) -> bool:
        return self.state is MachineState.AWAITING_GUIDANCE

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "workflow_id": self.workflow_id,
            "workflow_version": self.workflow_version,
            "unit_index": self.unit_index,
            "state": self.state.value,
            "bindings": self.bindings,
            "session_ref": self.session_ref,
            "clock": self.clock,
            "policy": self.policy.to_json(),
            "unit_logs": [u.to_json() for u in self.unit_logs],
            "answer": self.answer,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> Checkpoint:
        return cls(
            run_id=data["run_id"],
            workflow_id=data["workflow_id"],
            workflow_version=data["workflow_version"],
            unit_index=data["unit_index"],
            state=MachineState(data["state"]),
            bindings=data["bindings"],
            session_ref=data["session_ref"],
            clock=data["clock"],
            policy=RunPolicy.from_json(data["policy"]),
            unit_logs=tuple(_unit_log_from_json(u) for u in data["unit_logs"]),
            answer=data["answer"],
            seed=data["seed"],
        )


def _unit_log_from_json(data: dict) -> UnitLog:
    return UnitLog(
        unit_index=data["unit_index"],
        attempts=tuple(
            AttemptLog(
                verdicts=tuple(
                    CheckVerdict(
                        check_id=v["check_id"],
                        passed=v["passed"],
                        explanation=v["explanation"],
                        evidence_ref=v["evidence_ref"],
                        evaluated_by=EvaluatedBy(v["evaluated_by"]),
                    )
                    for v in a["verdicts"]
                ),
                action_status=a["action_status"],
                action_message=a["action_message"],
                snapshot_ref=a["snapshot_ref"],
                prelude=tuple(a["prelude"]),
                failed_check_id=a["failed_check_id"],
                failed_action=a["failed_action"],
            )
            for a in data["attempts"]
        ),
    )


# -- check evaluation --------------------------------------------------------------


def _ground_predicate(
    predicate: Predicate, snapshot: PageSnapshot, grounding: dict | None
) -> Predicate:
    """Point a label-addressed predicate at the element filling the same
    role and position when the recorded label is absent from this page."""
    target = getattr(predicate, "target", "")
    if not target or grounding is None:
        return predicate
    if any(e.visible and e.label == target for e in snapshot.elements):
        return predicate
    role = grounding.get("role")
    ordinal = grounding.get("ordinal", -1)
    same_role = [e for e in snapshot.elements if e.visible and e.role.value == role]
    if 0 <= ordinal < len(same_role):
        return replace(predicate, target=same_role[ordinal].label)
    return predicate


def _explain_failed_predicate(predicate: Predicate, snapshot: PageSnapshot) -> str:
    kind = predicate.kind.value
    target = getattr(predicate, "target", "")
    expected = getattr(predicate, "value", "")
    if kind in ("text_equals", "field_value"):
        actual = next(
            (e.text_value for e in snapshot.elements if e.visible and e.label == target),
            "<element not on page>",
        )
        return f'expected "{target}" to show {expected!r} but found {actual!r}'
    if kind == "no_overlay":
        labels = ", ".join(o.label for o in snapshot.overlays)
        return f"an overlay is covering the page (dismiss control: {labels})"
    if kind == "url_contains":
        return f"expected the address to contain {expected!r} but it is {snapshot.url!r}"
    if kind == "exists":
        return f'no visible element labeled "{target}" on this page'
    if kind == "not_exists":
        return f'element labeled "{target}" is still on this page'
    return "condition not met on this page"


def _page_summary(snapshot: PageSnapshot) -> str:
    return render_layout_text(
        snapshot.url, snapshot.title, snapshot.elements, snapshot.overlays
    )


def evaluate_check(
    check: ConditionCheck,
    snapshot: PageSnapshot,
    gateway: Gateway | None = None,
    mode: CheckMode = CheckMode.PREDICATE_FIRST,
    *,
    grounding: dict | None = None,
) -> CheckVerdict:
    """One condition against one page.

    PredicateFirst evaluates a machine predicate when the check has one and
    asks the model otherwise; ModelOnly always asks.  A reply that is not a
    yes/no verdict fails closed."""
    if mode is CheckMode.PREDICATE_FIRST and check.predicate is not None:
        predicate = _ground_predicate(check.predicate, snapshot, grounding)
        passed = evaluate_predicate(predicate, snapshot)
        return CheckVerdict(
            check_id=check.check_id,
            passed=passed,
            explanation="" if passed else _explain_failed_predicate(predicate, snapshot),
            evidence_ref=snapshot.screenshot_ref,
            evaluated_by=EvaluatedBy.PREDICATE,
        )
    if gateway is None:
        if mode is CheckMode.MODEL_ONLY:
            raise ValueError("model_only check mode needs a model gateway")
        # wording-only check with nothing to ask: treat as satisfied rather
        # than blocking a run on a condition nobody can evaluate
        return CheckVerdict(
            check_id=check.check_id,
            passed=True,
            explanation="no machine predicate and no model available",
            evidence_ref=snapshot.screenshot_ref,
            evaluated_by=EvaluatedBy.PREDICATE,
        )
    reply = gateway.ask(
        "condition_check_qa",
        {"check_text": check.nl_text, "page_summary": _page_summary(snapshot)},
        image_refs=(snapshot.screenshot_ref,),
    )
    try:
        verdict = parse_yes_no(reply.text)
    except Unparseable:
        return CheckVerdict(
            check_id=check.check_id,
            passed=False,
            explanation="unparseable verdict",
            evidence_ref=snapshot.screenshot_ref,
            evaluated_by=EvaluatedBy.MODEL_QA,
        )
    return CheckVerdict(
        check_id=check.check_id,
        passed=verdict.verdict,
        explanation=verdict.explanation or ("" if verdict.verdict else "condition not met"),
        evidence_ref=snapshot.screenshot_ref,
        evaluated_by=EvaluatedBy.MODEL_QA,
    )


# -- the run loop -------------------------------------------------------------------


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def last_event_sequence(store: Store, run_id: str) -> int:
    """Highest sequence number persisted for a run (0 when none)."""
    events = store.read_events(run_id)
    return events[-1]["sequence"] if events else 0


def append_run_event(store: Store, run_id: str, kind: str, **payload) -> dict:
    """Append one event to a run's stream, continuing its sequence."""
    event = {
        "run_id": run_id,
        "sequence": last_event_sequence(store, run_id) + 1,
        "kind": kind,
        "payload": payload,
        "timestamp": _now_iso(),
    }
    store.append_event(run_id, event)
    return event


@dataclass
class _RunContext:
    run_id: str
    family_id: str
    store: Store | None
    gateway: Gateway | None
    policy: RunPolicy
    seed: int
    unit_logs: list[UnitLog] = field(default_factory=list)
    answer: str = ""
    recent_refs: list[str] = field(default_factory=list)
    sequence: int = 0

    def emit(self, kind: str, **payload) -> None:
        self.sequence += 1
        if self.store is not None and self.run_id:
            self.store.append_event(
                self.run_id,
                {
                    "run_id": self.run_id,
                    "sequence": self.sequence,
                    "kind": kind,
                    "payload": payload,
                    "timestamp": _now_iso(),
                },
            )

    def saw(self, snapshot: PageSnapshot) -> PageSnapshot:
        if self.store is not None and self.run_id:
            self.store.save_snapshot(self.family_id, self.run_id, snapshot)
        if not self.recent_refs or self.recent_refs[-1] != snapshot.screenshot_ref:
            self.recent_refs.append(snapshot.screenshot_ref)
            del self.recent_refs[:-3]
        return snapshot


def _clauses_with_groundings(
    unit: StepUnit,
) -> list[tuple[ActionCommand, dict | None]]:
    clauses = parse_action_text(unit.action_text)
    hints = unit.extra.get("groundings", [])
    if len(hints) != len(clauses):
        hints = [None] * len(clauses)
    return list(zip(clauses, hints))


_VALUE_KINDS = (PredicateKind.TEXT_EQUALS, PredicateKind.FIELD_VALUE)


def _target_visible(predicate: Predicate, snapshot: PageSnapshot) -> bool:
    return any(e.visible and e.label == predicate.target for e in snapshot.elements)


def _attempt_unit(
    unit: StepUnit,
    env: Env,
    snapshot: PageSnapshot,
    ctx: _RunContext,
    prelude: tuple[str, ...],
    stash: dict[str, CheckVerdict],
    *,
    post_only: bool = False,
) -> tuple[AttemptLog, PageSnapshot, str | None]:
    """Run pre-checks, the action clauses, then post-checks once.

    Value-reading post-checks (text_equals / field_value) are judged at the
    last point in the attempt where their target was on screen — a step that
    submits a form navigates away from the very fields those checks read, so
    the verdict that counts is the one taken just before the page moved on.
    The ``stash`` holding those provisional verdicts is shared across a
    unit's attempts: when a fallback finishes the unit's own trailing
    clauses (``post_only``), the values were last seen during the attempt
    that filled them in.  Every other check is judged on the final page.

    Returns the attempt log, the page afterwards, and the answer text when
    this attempt answered and every post-check passed."""
    verdicts: list[CheckVerdict] = []
    answer: str | None = None

    def judge(check: ConditionCheck, on: PageSnapshot) -> CheckVerdict:
        return evaluate_check(
            check, on, ctx.gateway, ctx.policy.check_mode,
            grounding=check.extra.get("grounding"),
        )

    def record(check: ConditionCheck, verdict: CheckVerdict, phase_name: str) -> None:
        verdicts.append(verdict)
        ctx.emit(
            "CheckEvaluated",
            unit=unit.index,
            check_id=check.check_id,
            phase=phase_name,
            passed=verdict.passed,
            explanation=verdict.explanation,
        )

    value_checks = [
        c
        for c in unit.post_checks
        if c.predicate is not None and c.predicate.kind in _VALUE_KINDS
    ]

    def stash_value_checks(on: PageSnapshot) -> None:
        for check in value_checks:
            predicate = _ground_predicate(
                check.predicate, on, check.extra.get("grounding")
            )
            if _target_visible(predicate, on):
                stash[check.check_id] = judge(check, on)

    action_status = "ok"
    action_message = "action completed by fallback" if post_only else ""

    if not post_only:
        for check in unit.pre_checks:
            verdict = judge(check, snapshot)
            record(check, verdict, "pre")
            if not verdict.passed:
                return (
                    AttemptLog(
                        verdicts=tuple(verdicts),
                        action_status="",
                        action_message="",
                        snapshot_ref=snapshot.screenshot_ref,
                        prelude=prelude,
                        failed_check_id=check.check_id,
                    ),
                    snapshot,
                    None,
                )

        for command, grounding in _clauses_with_groundings(unit):
            grounded = ground_command(command, grounding, snapshot)
            outcome = env.apply(grounded)
            snapshot = ctx.saw(outcome.after)
            ctx.emit(
                "ActionApplied",
                unit=unit.index,
                command=describe(grounded),
                status=outcome.status.value,
                message=outcome.message,
            )
            if not outcome.ok:
                return (
                    AttemptLog(
                        verdicts=tuple(verdicts),
                        action_status=outcome.status.value,
                        action_message=outcome.message,
                        snapshot_ref=snapshot.screenshot_ref,
                        prelude=prelude,
                        failed_action=describe(grounded),
                    ),
                    snapshot,
                    None,
                )
            if grounded.kind is CommandKind.ANSWER:
                answer = grounded.text
            action_message = outcome.message
            stash_value_checks(snapshot)

    failed_check = ""
    for check in unit.post_checks:
        if check.check_id in stash and not _target_visible(
            _ground_predicate(check.predicate, snapshot, check.extra.get("grounding")),
            snapshot,
        ):
            verdict = stash[check.check_id]
        else:
            verdict = judge(check, snapshot)
        record(check, verdict, "post")
        if not verdict.passed and not failed_check:
            failed_check = check.check_id

    return (
        AttemptLog(
            verdicts=tuple(verdicts),
            action_status=action_status,
            action_message=action_message,
            snapshot_ref=snapshot.screenshot_ref,
            prelude=prelude,
            failed_check_id=failed_check,
        ),
        snapshot,
        None if failed_check else answer,
    )


def _run_fallback(
    unit: StepUnit, retry: int, env: Env, snapshot: PageSnapshot, ctx: _RunContext
) -> tuple[tuple[str, ...], PageSnapshot, bool, str | None]:
    """Execute the fallback for this retry (rank min(retry, R)); with no
    fallbacks the retry is a bare re-attempt.

    Also reports whether the fallback re-issued the unit's own trailing
    clause(s) and they all landed — in that case the unit's action is
    already done (re-running it would act on the page it navigated to), so
    the caller should go straight to the post-checks."""
    if not unit.fallbacks:
        return (), snapshot, False, None
    fallback = unit.fallbacks[min(retry, len(unit.fallbacks)) - 1]
    hints = fallback.extra.get("groundings", [])
    if len(hints) != len(fallback.commands):
        hints = [None] * len(fallback.commands)
    messages = []
    answer: str | None = None
    all_ok = bool(fallback.commands)
    for command, grounding in zip(fallback.commands, hints):
        grounded = ground_command(command, grounding, snapshot)
        outcome = env.apply(grounded)
        snapshot = ctx.saw(outcome.after)
        ctx.emit(
            "ActionApplied",
            unit=unit.index,
            command=describe(grounded),
            status=outcome.status.value,
            message=outcome.message,
            fallback_rank=fallback.rank,
        )
        messages.append(outcome.message)
        if not outcome.ok:
            all_ok = False
        elif grounded.kind is CommandKind.ANSWER:
            answer = grounded.text
    if not fallback.commands:
        messages.append(f"fallback guidance (no direct commands): {fallback.nl_text}")
    clause_texts = [describe(c) for c in parse_action_text(unit.action_text)]
    fallback_texts = [describe(c) for c in fallback.commands]
    completed_tail = (
        all_ok
        and bool(fallback_texts)
        and clause_texts[-len(fallback_texts) :] == fallback_texts
    )
    return tuple(messages), snapshot, completed_tail, answer


def _session_ref(env: Env) -> dict:
    grab = getattr(env, "session_ref", None)
    return grab() if callable(grab) else {}


def _finish(
    ctx: _RunContext,
    outcome: RunOutcome,
    doc: WorkflowDoc,
    checkpoint_state: MachineState,
    env: Env,
    bindings: dict,
) -> RunReport:
    report = RunReport(
        run_id=ctx.run_id,
        outcome=outcome,
        unit_logs=tuple(ctx.unit_logs),
        answer=ctx.answer,
        final_snapshot_refs=tuple(ctx.recent_refs[-3:]),
        workflow_id=doc.workflow_id,
        workflow_version=doc.version,
    )
    if ctx.store is not None and ctx.run_id:
        ctx.store.save_run_report(ctx.run_id, report.to_json())
        ctx.store.save_checkpoint(
            ctx.run_id,
            Checkpoint(
                run_id=ctx.run_id,
                workflow_id=doc.workflow_id,
                workflow_version=doc.version,
                unit_index=len(doc.units),
                state=checkpoint_state,
                bindings=bindings,
                session_ref=_session_ref(env),
                clock=0,
                policy=ctx.policy,
                unit_logs=tuple(ctx.unit_logs),
                answer=ctx.answer,
                seed=ctx.seed,
            ).to_json(),
        )
    ctx.emit("Finished", outcome=outcome.value)
    return report


def _execute_units(
    doc: WorkflowDoc,
    bound: WorkflowDoc,
    start_unit: int,
    env: Env,
    snapshot: PageSnapshot,
    bindings: dict,
    ctx: _RunContext,
) -> RunReport | tuple[Checkpoint, UserNotification]:
    for unit in bound.units[start_unit:]:
        ctx.emit("UnitStarted", unit=unit.index, action=unit.action_text)
        attempts: list[AttemptLog] = []
        prelude: tuple[str, ...] = ()
        stash: dict[str, CheckVerdict] = {}
        post_only = False
        fallback_answer: str | None = None
        while True:
            try:
                log, snapshot, answer = _attempt_unit(
                    unit, env, snapshot, ctx, prelude, stash, post_only=post_only
                )
            except (AdapterUnavailable, SessionClosed) as exc:
                ctx.unit_logs.append(UnitLog(unit.index, tuple(attempts)))
                ctx.emit("Paused", unit=unit.index, reason=f"adapter unavailable: {exc}")
                return _finish(
                    ctx, RunOutcome.ABORTED, doc, MachineState.ABORTED, env, bindings
                )
            if post_only and answer is None:
                answer = fallback_answer
            post_only = False
            attempts.append(log)
            if log.ok:
                if answer is not None:
                    ctx.answer = answer
                break
            done_retries = len(attempts) - 1
            if done_retries >= ctx.policy.max_retries:
                ctx.unit_logs.append(UnitLog(unit.index, tuple(attempts)))
                if not ctx.policy.pause_on_exhaustion:
                    return _finish(
                        ctx, RunOutcome.ABORTED, doc, MachineState.ABORTED, env, bindings
                    )
                notification = build_notification(
                    unit, tuple(attempts), ctx.gateway, run_id=ctx.run_id
                )
                checkpoint = Checkpoint(
                    run_id=ctx.run_id,
                    workflow_id=doc.workflow_id,
                    workflow_version=doc.version,
                    unit_index=unit.index,
                    state=MachineState.AWAITING_GUIDANCE,
                    bindings=bindings,
                    session_ref=_session_ref(env),
                    clock=snapshot.clock,
                    policy=ctx.policy,
                    unit_logs=tuple(ctx.unit_logs),
                    answer=ctx.answer,
                    seed=ctx.seed,
                )
                if ctx.store is not None and ctx.run_id:
                    ctx.store.save_checkpoint(ctx.run_id, checkpoint.to_json())
                    ctx.store.save_notification(ctx.run_id, notification.to_json())
                ctx.emit("Paused", unit=unit.index, reason="retries exhausted")
                ctx.emit("NotificationReady", unit=unit.index, where=notification.where)
                return checkpoint, notification
            retry_number = done_retries + 1
            ctx.emit("RetryStarted", unit=unit.index, retry=retry_number)
            try:
                prelude, snapshot, post_only, fallback_answer = _run_fallback(
                    unit, retry_number, env, snapshot, ctx
                )
            except (AdapterUnavailable, SessionClosed) as exc:
                ctx.unit_logs.append(UnitLog(unit.index, tuple(attempts)))
                ctx.emit("Paused", unit=unit.index, reason=f"adapter unavailable: {exc}")
                return _finish(
                    ctx, RunOutcome.ABORTED, doc, MachineState.ABORTED, env, bindings
                )
        ctx.unit_logs.append(UnitLog(unit.index, tuple(attempts)))
    return _finish(ctx, RunOutcome.COMPLETED, doc, MachineState.COMPLETED, env, bindings)


def run_guarded(
    workflow: WorkflowDoc,
    bindings: dict,
    env: Env,
    policy: RunPolicy = RunPolicy(),
    *,
    seed: int = 0,
    run_id: str = "",
    store: Store | None = None,
    gateway: Gateway | None = None,
) -> RunReport | tuple[Checkpoint, UserNotification]:
    """Execute a bound workflow under guard semantics.

    Returns a RunReport when the run finishes on its own, or the persisted
    (Checkpoint, UserNotification) pair when it pauses for guidance."""
    bound = bind(workflow, bindings)
    violations = validate_workflow(bound)
    if violations:
        raise ValueError(f"workflow does not bind cleanly: {violations[0]}")
    ctx = _RunContext(
        run_id=run_id,
        family_id=workflow.family_id,
        store=store,
        gateway=gateway,
        policy=policy,
        seed=seed,
    )
    try:
        snapshot = env.reset(seed)
    except (AdapterUnavailable, SessionClosed, OSError) as exc:
        raise AdapterUnavailable(f"environment did not start: {exc}") from exc
    ctx.saw(snapshot)
    return _execute_units(workflow, bound, 0, env, snapshot, bindings, ctx)


# -- notifications -------------------------------------------------------------------


def _attempts_digest(attempts: tuple[AttemptLog, ...]) -> str:
    lines = []
    for number, attempt in enumerate(attempts, start=1):
        if attempt.prelude:
            lines.append(f"before attempt {number}: " + " | ".join(attempt.prelude))
        if attempt.failed_check_id:
            verdict = next(
                (v for v in attempt.verdicts if v.check_id == attempt.failed_check_id),
                None,
            )
            detail = verdict.explanation if verdict else "check failed"
            lines.append(f"attempt {number}: blocked by a condition check — {detail}")
        elif attempt.failed_action:
            lines.append(
                f"attempt {number}: {attempt.failed_action} failed — {attempt.action_message}"
            )
        else:
            lines.append(f"attempt {number}: succeeded")
    return "\n".join(lines)


def build_notification(
    unit: StepUnit,
    attempts: tuple[AttemptLog, ...],
    gateway: Gateway | None = None,
    *,
    run_id: str = "",
) -> UserNotification:
    """The four-part plea for help: where it stuck, why, what was tried,
    and how the user could unblock it.  With no model available every field
    is assembled from the attempt logs directly."""
    last = attempts[-1]
    if last.failed_check_id:
        phase = "pre" if any(
            c.check_id == last.failed_check_id for c in unit.pre_checks
        ) else "post"
        where = f"unit {unit.index} / {phase}-check {last.failed_check_id}"
        failing = next(
            (
                c
                for c in (*unit.pre_checks, *unit.post_checks)
                if c.check_id == last.failed_check_id
            ),
            None,
        )
        verdict = next(
            (v for v in last.verdicts if v.check_id == last.failed_check_id), None
        )
        why = (
            f"the condition {failing.nl_text!r} was not met"
            f"{': ' + verdict.explanation if verdict and verdict.explanation else ''}"
        )
    else:
        where = f"unit {unit.index} / action: {last.failed_action}"
        why = f"the action kept failing: {last.action_message}"

    digest = _attempts_digest(attempts)
    fallback_texts = [f.nl_text for f in unit.fallbacks]
    what = tips = ""
    if gateway is not None:
        # A model can phrase the plea better, but a broken model must never
        # stop the notification from being written.
        try:
            what = gateway.ask(
                "challenge_identification",
                {"unit_action": unit.action_text, "attempts_digest": digest},
                image_refs=tuple(a.snapshot_ref for a in attempts[-3:]),
            ).text
            tips = gateway.ask(
                "actionable_guidance",
                {
                    "unit_action": unit.action_text,
                    "fallback_texts": "\n".join(fallback_texts) or "(none)",
                    "attempts_digest": digest,
                },
            ).text
        except GatewayError:
            what = tips = ""
    if not what:
        what = (
            f"the step {unit.action_text!r} was attempted {len(attempts)} time(s):\n{digest}"
        )
    if not tips:
        tips = (
            "Tell the agent what to do differently: a condition to ensure "
            '("make sure ... before/after ...") or a control to use '
            '("click ...", "type ... into ...").'
        )
    how_parts = []
    if fallback_texts:
        how_parts.append("Recoveries already tried: " + "; ".join(fallback_texts) + ".")
    how_parts.append(tips)
    return UserNotification(
        run_id=run_id,
        where=where,
        why=why,
        what=what,
        how=" ".join(how_parts),
        attempts=tuple(a.snapshot_ref for a in attempts),
    )


# -- guidance integration ---------------------------------------------------------------


_CONDITION_RE = re.compile(
    r"(?i)^\s*(?:please\s+)?(?:make\s+sure|ensure)\s+(?:that\s+)?(?P<condition>.+?)\s*$"
)
_ACTION_VERBS = (
    "click",
    "press",
    "tap",
    "dismiss",
    "close",
    "type",
    "enter",
    "fill",
    "select",
    "choose",
    "pick",
    "navigate",
    "go",
    "open",
    "scroll",
)
_QUOTED = re.compile(r"[\"“”']([^\"“”']+)[\"“”']")


def _split_clauses(text: str) -> list[str]:
    parts = re.split(r"(?<=[.!?])\s+|\n+|;\s*", text.strip())
    return [p.strip().rstrip(".!?") for p in parts if p.strip()]


def _target_phrase(rest: str) -> str:
    rest = rest.strip()
    quoted = _QUOTED.search(rest)
    if quoted:
        return quoted.group(1)
    for cut in (" on ", " in ", " at ", " of "):
        if cut in rest:
            rest = rest.split(cut, 1)[0]
    words = [w for w in rest.split() if w.lower() not in ("the", "a", "an")]
    while words and words[-1].lower() in ("again", "button", "link", "once", "more"):
        words.pop()
    return " ".join(words)


def _command_from_phrase(phrase: str) -> ActionCommand | None:
    if '"' in phrase:
        try:
            parsed = parse_action_text(phrase.strip())
            if len(parsed) == 1:
                return parsed[0]
        except ClauseError:
            pass
    words = phrase.strip().split()
    if not words:
        return None
    verb = words[0].lower()
    rest = phrase.strip()[len(words[0]) :].strip()
    if verb in ("click", "press", "tap", "dismiss", "close"):
        target = _target_phrase(rest)
        return ActionCommand.click(target) if target else None
    if verb in ("type", "enter", "fill"):
        quoted = _QUOTED.findall(phrase)
        if len(quoted) >= 2:
            return ActionCommand.type_text(quoted[1], quoted[0])
        return None
    if verb in ("select", "choose", "pick"):
        quoted = _QUOTED.findall(phrase)
        if len(quoted) >= 2:
            return ActionCommand.select(quoted[1], quoted[0])
        return None
    if verb in ("navigate", "go", "open"):
        match = re.search(r"(\w+://\S+|/\S+)", rest)
        return ActionCommand.visit(match.group(1)) if match else None
    if verb == "scroll":
        direction = "up" if "up" in rest.lower() else "down"
        return ActionCommand.scroll(direction)
    return None


def _classify_clause(clause: str) -> dict:
    condition = _CONDITION_RE.match(clause)
    if condition:
        text = condition.group("condition")
        phase = "post" if re.search(r"(?i)\bafter\b", text) else "pre"
        return {"type": "check", "phase": phase, "nl_text": text}
    first = clause.split()[0].lower() if clause.split() else ""
    if first in _ACTION_VERBS:
        commands = []
        for part in re.split(r",?\s+(?:and\s+)?then\s+|,\s+", clause):
            command = _command_from_phrase(part)
            if command is not None:
                commands.append(command)
        return {"type": "fallback", "nl_text": clause, "commands": commands}
    return {"type": "fallback", "nl_text": clause, "unclassified": True, "commands": []}


def _items_from_gateway(gateway: Gateway, raw_text: str, unit: StepUnit) -> list[dict]:
    from .gateway import extract_json

    reply = gateway.ask(
        "guidance_integration",
        {"guidance_text": raw_text, "unit_action": unit.action_text},
    )
    items = extract_json(reply.text)
    if not isinstance(items, list):
        raise Unparseable("guidance integration reply is not a list")
    cleaned = []
    for item in items:
        if not isinstance(item, dict) or item.get("type") not in ("check", "fallback"):
            raise Unparseable(f"unrecognized guidance item: {item!r}")
        if item["type"] == "fallback":
            item = dict(item)
            # command entries arrive as action phrases; keep the ones that parse
            parsed = (_command_from_phrase(str(p)) for p in item.get("commands", []))
            item["commands"] = [c for c in parsed if c is not None]
        cleaned.append(item)
    return cleaned


def integrate_guidance(
    workflow: WorkflowDoc,
    raw_text: str,
    target_unit: int,
    gateway: Gateway | None = None,
    *,
    run_id: str = "",
) -> tuple[WorkflowDoc, GuidanceNote]:
    """Fold a person's free-form guidance into the workflow as new guards.

    Condition-style clauses become checks, imperative clauses become
    fallbacks at the next rank, and anything unclassifiable is preserved
    verbatim as a flagged wording-only fallback — guidance is never
    dropped.  The result is a new version; nothing existing is touched."""
    if not (0 <= target_unit < len(workflow.units)):
        raise IndexError(f"no unit {target_unit} in workflow {workflow.workflow_id}")
    unit = workflow.units[target_unit]
    if gateway is not None:
        items = _items_from_gateway(gateway, raw_text, unit)
    else:
        items = [_classify_clause(clause) for clause in _split_clauses(raw_text)]
    if not items:
        items = [{"type": "fallback", "nl_text": raw_text.strip() or "(empty guidance)",
                  "unclassified": True, "commands": []}]

    note_id = content_id("gn", run_id, workflow.version, raw_text)
    version = workflow.version + 1
    new_pre = list(unit.pre_checks)
    new_post = list(unit.post_checks)
    new_fallbacks = list(unit.fallbacks)
    next_rank = max((f.rank for f in unit.fallbacks), default=0)
    parsed_into = []

    for item in items:
        if item["type"] == "check":
            phase = Phase.POST if item.get("phase") == "post" else Phase.PRE
            check = ConditionCheck(
                check_id=content_id("chk", version, target_unit, phase.value, item["nl_text"]),
                phase=phase,
                nl_text=item["nl_text"],
                predicate=None,
                origin=Origin.USER_GUIDANCE,
                extra={"note_id": note_id},
            )
            (new_pre if phase is Phase.PRE else new_post).append(check)
            parsed_into.append(check.check_id)
        else:
            next_rank += 1
            extra = {"note_id": note_id}
            if item.get("unclassified"):
                extra["warning"] = "unclassifiable_guidance"
            commands = tuple(
                c for c in item.get("commands", ()) if isinstance(c, ActionCommand)
            )
            fallback = FallbackAction(
                fallback_id=content_id("fb", version, target_unit, next_rank, item["nl_text"]),
                rank=next_rank,
                nl_text=item["nl_text"],
                commands=commands,
                origin=Origin.USER_GUIDANCE,
                extra=extra,
            )
            new_fallbacks.append(fallback)
            parsed_into.append(fallback.fallback_id)

    units = list(workflow.units)
    units[target_unit] = replace(
        unit,
        pre_checks=tuple(new_pre),
        post_checks=tuple(new_post),
        fallbacks=tuple(new_fallbacks),
    )
    note = GuidanceNote(
        note_id=note_id, run_id=run_id, raw_text=raw_text, parsed_into=tuple(parsed_into)
    )
    doc = replace(
        workflow,
        version=version,
        units=tuple(units),
        provenance=Provenance(
            run_ids=workflow.provenance.run_ids,
            guidance_note_ids=(*workflow.provenance.guidance_note_ids, note.note_id),
        ),
    )
    violations = validate_workflow(doc)
    if violations:
        raise ValueError(f"guidance integration broke the document: {violations[0]}")
    return doc, note


# -- resume ---------------------------------------------------------------------------


def finish_declined(checkpoint: Checkpoint, store: Store | None = None) -> RunReport:
    """Close out a paused run whose user declined to help."""
    if not checkpoint.resumable:
        raise NotAwaitingGuidance(f"run {checkpoint.run_id} is not paused for guidance")
    report = RunReport(
        run_id=checkpoint.run_id,
        outcome=RunOutcome.FAILED_AFTER_GUIDANCE_DECLINED,
        unit_logs=checkpoint.unit_logs,
        answer="",
        final_snapshot_refs=tuple(
            a.snapshot_ref for a in checkpoint.unit_logs[-1].attempts[-3:]
        )
        if checkpoint.unit_logs
        else (),
        workflow_id=checkpoint.workflow_id,
        workflow_version=checkpoint.workflow_version,
    )
    if store is not None:
        store.save_run_report(checkpoint.run_id, report.to_json())
        store.save_checkpoint(
            checkpoint.run_id,
            replace(checkpoint, state=MachineState.ABORTED).to_json(),
        )
    return report


def resume(
    checkpoint: Checkpoint,
    workflow: WorkflowDoc,
    *,
    env: Env | None = None,
    store: Store | None = None,
    gateway: Gateway | None = None,
    force: bool = False,
) -> RunReport | tuple[Checkpoint, UserNotification]:
    """Pick a paused run back up with an updated workflow.

    The paused unit's retry budget starts fresh and its guards come from the
    new version; the environment session is restored exactly as it was left
    (the simulator replays its history and must land on the same page)."""
    if not checkpoint.resumable:
        raise NotAwaitingGuidance(f"run {checkpoint.run_id} is not paused for guidance")
    if workflow.workflow_id != checkpoint.workflow_id:
        raise StaleCheckpoint(
            f"checkpoint belongs to workflow {checkpoint.workflow_id}, got {workflow.workflow_id}"
        )
    if workflow.version <= checkpoint.workflow_version and not force:
        raise VersionUnchanged(
            "resuming with the same workflow version would repeat the same failure; "
            "integrate guidance first or pass force"
        )
    if env is None:
        env = _restore_sim_env(checkpoint)
    try:
        snapshot = env.snapshot()
    except (SessionClosed, OSError) as exc:
        raise StaleCheckpoint(f"checkpointed session unrecoverable: {exc}") from exc
    if snapshot.clock != checkpoint.clock:
        raise StaleCheckpoint(
            f"restored session is at clock {snapshot.clock}, checkpoint was at {checkpoint.clock}"
        )
    bound = bind(workflow, checkpoint.bindings)
    violations = validate_workflow(bound)
    if violations:
        raise ValueError(f"workflow does not bind cleanly: {violations[0]}")
    ctx = _RunContext(
        run_id=checkpoint.run_id,
        family_id=workflow.family_id,
        store=store,
        gateway=gateway,
        policy=checkpoint.policy,
        seed=checkpoint.seed,
        unit_logs=list(checkpoint.unit_logs),
        answer=checkpoint.answer,
        sequence=last_event_sequence(store, checkpoint.run_id) if store else 0,
    )
    ctx.saw(snapshot)
    ctx.emit("Resumed", unit=checkpoint.unit_index, version=workflow.version)
    return _execute_units(
        workflow, bound, checkpoint.unit_index, env, snapshot, checkpoint.bindings, ctx
    )


def _restore_sim_env(checkpoint: Checkpoint) -> Env:
    from .simweb import SimWeb
    from .sites import SITES

    ref = checkpoint.session_ref
    site_id = ref.get("site_id") if isinstance(ref, dict) else None
    if not site_id or site_id not in SITES:
        raise StaleCheckpoint(
            f"checkpoint for run {checkpoint.run_id} has no restorable session"
        )
    return SimWeb.restore(SITES[site_id], ref)
