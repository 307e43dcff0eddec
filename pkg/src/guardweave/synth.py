"""Guarded-workflow synthesis from a family's exploration traces.

Failed traces teach the checks: each failing event is classified into an
error pattern and becomes a pre- or post-condition anchored to the step it
hit.  Successful traces teach the recoveries: extra actions that successful
runs took at those same steps (dismissing an overlay, re-issuing a click
that had timed out) become ranked fallbacks.  The plan skeleton comes from
the shortest successful trace, with consecutive same-page events merged
into one step.  Everything is evidence-bound — no guard is attached to a
step that never failed, and every check and fallback cites the stored
trace events it came from.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .actions import (
    ActionCommand,
    CommandKind,
    describe,
    join_clauses,
    parse_action_text,
)
from .env import OVERLAY_DISMISS_ROLE, OutcomeStatus, PageSnapshot, grounding_of
from .gateway import Gateway
from .model import (
    ConditionCheck,
    FallbackAction,
    Phase,
    Predicate,
    Provenance,
    StepUnit,
    TaskSpec,
    WorkflowDoc,
    content_id,
    genericize,
    validate_workflow,
)
from .store import ActionEvent, RunRecord, RunLedger, Store, TraceRecord

SnapshotResolver = Callable[[str], PageSnapshot]


class ErrorPattern(str, Enum):
    NOT_LOCATED = "NotLocated"
    INACTIVE = "Inactive"
    NOT_LOADED = "NotLoaded"
    INTERCEPTED = "Intercepted"
    WRONG_VALUE = "WrongValue"
    PARTIAL_ACTION = "PartialAction"


# Failure wording that marks an event as a challenge even when its status
# code alone wouldn't; extensible by callers.
FAILURE_LEXICON = (
    "failed to",
    "didn't",
    "couldn't",
    "inactive",
    "can't be located",
    "doesn't load",
)

_STATUS_PATTERNS = {
    OutcomeStatus.ELEMENT_NOT_FOUND: ErrorPattern.NOT_LOCATED,
    OutcomeStatus.INTERCEPTED: ErrorPattern.INTERCEPTED,
    OutcomeStatus.DISABLED: ErrorPattern.INACTIVE,
    OutcomeStatus.TIMEOUT: ErrorPattern.NOT_LOADED,
    OutcomeStatus.NO_EFFECT: ErrorPattern.PARTIAL_ACTION,
}

_LEXICON_PATTERNS = (
    ("can't be located", ErrorPattern.NOT_LOCATED),
    ("inactive", ErrorPattern.INACTIVE),
    ("doesn't load", ErrorPattern.NOT_LOADED),
    ("couldn't", ErrorPattern.INTERCEPTED),
    ("didn't", ErrorPattern.PARTIAL_ACTION),
    ("failed to", ErrorPattern.PARTIAL_ACTION),
)

MAX_CHECKS_PER_PHASE = 3
MAX_FALLBACKS = 3


class EmptyTrace(RuntimeError):
    """A trace with no successful events cannot seed a plan."""


class IndexOutOfRange(RuntimeError):
    """A finding or recovery points outside the skeleton."""


class NoSuccessfulRun(RuntimeError):
    """Synthesis needs at least one successful execution; explore more."""


@dataclass(frozen=True)
class Evidence:
    """A pointer into a stored trace: which run, which event."""

    run_id: str
    event_index: int

    def to_json(self) -> dict:
        return {"run_id": self.run_id, "event_index": self.event_index}


@dataclass(frozen=True)
class ChallengeFinding:
    """One observed failure mode at one skeleton step."""

    step_index: int
    pattern: ErrorPattern
    evidence: tuple[Evidence, ...]
    phase: Phase
    nl_condition: str
    predicate: Predicate | None = None
    # role+ordinal of the element the predicate inspects, so the check can
    # find its target on sites that word the same control differently
    grounding: dict | None = None

    def to_json(self) -> dict:
        return {
            "step_index": self.step_index,
            "pattern": self.pattern.value,
            "evidence": [e.to_json() for e in self.evidence],
            "phase": self.phase.value,
            "nl_condition": self.nl_condition,
        }


@dataclass(frozen=True)
class RecoveryFinding:
    """What successful runs did about a challenge at one step."""

    step_index: int
    source_run_id: str
    description: str
    commands: tuple[ActionCommand, ...]
    support: int  # how many successful runs took this recovery
    groundings: tuple[dict | None, ...] = ()

    def to_json(self) -> dict:
        return {
            "step_index": self.step_index,
            "source_run_id": self.source_run_id,
            "description": self.description,
            "support": self.support,
        }


@dataclass(frozen=True)
class SkeletonStep:
    page: str
    action_text: str
    groundings: tuple[dict | None, ...] = ()

    def commands(self) -> list[ActionCommand]:
        return parse_action_text(self.action_text)


@dataclass(frozen=True)
class PlanSkeleton:
    steps: tuple[SkeletonStep, ...]

    @property
    def descriptions(self) -> list[str]:
        return [step.action_text for step in self.steps]

    def __len__(self) -> int:
        return len(self.steps)


# -- plan learning ----------------------------------------------------------------


def _is_overlay_dismissal(event: ActionEvent, before: PageSnapshot) -> bool:
    return event.command.kind is CommandKind.CLICK and any(
        o.label == event.command.target for o in before.overlays
    )


def learn_plan(
    trace: TraceRecord,
    resolve: SnapshotResolver,
    *,
    gateway: Gateway | None = None,
    task_text: str = "",
) -> PlanSkeleton:
    """Distill a successful trace into its major steps.

    Consecutive successful events on the same page merge into one step;
    failed attempts and overlay dismissals are recovery noise, not plan.
    With a gateway, the plan prompt proposes the step list instead and is
    parsed back through the same grammar.
    """
    clean: list[tuple[ActionEvent, PageSnapshot]] = []
    for event in trace.events:
        if event.status is not OutcomeStatus.OK:
            continue
        before = resolve(event.snapshot_before_ref)
        if _is_overlay_dismissal(event, before):
            continue
        clean.append((event, before))
    if not clean:
        raise EmptyTrace("trace has no successful events to learn from")

    if gateway is not None:
        reply = gateway.ask(
            "plan_learning",
            {
                "task_text": task_text,
                "trace_messages": "\n".join(e.message for e, _ in clean),
            },
        )
        lines = [ln.strip(" -*") for ln in reply.text.splitlines()]
        lines = [re.sub(r"^\d+[.)]\s*", "", ln) for ln in lines if ln.strip()]
        steps = tuple(SkeletonStep(page="", action_text=line) for line in lines)
        if not steps:
            raise EmptyTrace("plan reply contained no steps")
        return PlanSkeleton(steps=steps)

    steps: list[SkeletonStep] = []
    group: list[tuple[ActionEvent, PageSnapshot]] = []

    def flush() -> None:
        if not group:
            return
        commands = [e.command for e, _ in group]
        groundings = tuple(grounding_of(e.command, before) for e, before in group)
        steps.append(
            SkeletonStep(
                page=group[0][1].page_path(),
                action_text=join_clauses(commands),
                groundings=groundings,
            )
        )
        group.clear()

    for event, before in clean:
        if group and before.page_path() != group[0][1].page_path():
            flush()
        group.append((event, before))
    flush()
    return PlanSkeleton(steps=tuple(steps))


# -- step alignment -----------------------------------------------------------------


def _nearest_step(skeleton: PlanSkeleton, page: str, hint: int) -> int:
    """The skeleton step for a page, preferring the first match at or after
    the hint position, else the last earlier match, else the hint itself."""
    for index in range(hint, len(skeleton.steps)):
        if skeleton.steps[index].page == page:
            return index
    for index in range(min(hint, len(skeleton.steps) - 1), -1, -1):
        if skeleton.steps[index].page == page:
            return index
    return min(hint, len(skeleton.steps) - 1)


# -- condition checks from failed traces ------------------------------------------------


def _classify(event: ActionEvent) -> ErrorPattern | None:
    if event.status in _STATUS_PATTERNS:
        return _STATUS_PATTERNS[event.status]
    message = event.message.lower()
    if any(phrase in message for phrase in FAILURE_LEXICON):
        for phrase, pattern in _LEXICON_PATTERNS:
            if phrase in message:
                return pattern
    return None


def _clause_for_grounding(
    skeleton: PlanSkeleton, kind: CommandKind, grounding: dict | None
) -> tuple[int, ActionCommand, dict] | None:
    """The skeleton clause that acts on the same control: same command kind,
    same role+ordinal position on its page."""
    if grounding is None:
        return None
    for step_index, step in enumerate(skeleton.steps):
        commands = step.commands()
        if len(commands) != len(step.groundings):
            continue
        for command, candidate in zip(commands, step.groundings):
            if command.kind is kind and candidate == grounding:
                return step_index, command, candidate
    return None


def _wrong_value_findings(
    run_id: str,
    trace: TraceRecord,
    task: TaskSpec,
    skeleton: PlanSkeleton,
    resolve: SnapshotResolver,
) -> list[ChallengeFinding]:
    """A form field filled with a value the task never asked for.

    The stray fill is matched to the skeleton clause that serves the same
    control (same role, same position), which names both the canonical field
    label and the value it should hold."""
    findings = []
    bound_values = set(task.bindings.values())
    for index, event in enumerate(trace.events):
        if event.status is not OutcomeStatus.OK:
            continue
        if event.command.kind is CommandKind.TYPE_TEXT:
            typed = event.command.text
        elif event.command.kind is CommandKind.SELECT:
            typed = event.command.option
        else:
            continue
        if not typed or typed in bound_values:
            continue
        before = resolve(event.snapshot_before_ref)
        clause = _clause_for_grounding(
            skeleton, event.command.kind, grounding_of(event.command, before)
        )
        if clause is None:
            continue
        step, command, grounding = clause
        correct = command.text if command.kind is CommandKind.TYPE_TEXT else command.option
        if not correct or not command.target:
            continue
        findings.append(
            ChallengeFinding(
                step_index=step,
                pattern=ErrorPattern.WRONG_VALUE,
                evidence=(Evidence(run_id, index),),
                phase=Phase.POST,
                nl_condition=f'"{command.target}" shows {correct}',
                predicate=Predicate.text_equals(command.target, correct),
                grounding=grounding,
            )
        )
    return findings


def extract_condition_checks(
    failed: list[tuple[str, TraceRecord, TaskSpec]],
    skeleton: PlanSkeleton,
    resolve_for: Callable[[str], SnapshotResolver],
) -> list[ChallengeFinding]:
    """Turn every failing event in the failed traces into a finding, merged
    by (step, pattern, condition)."""
    merged: dict[tuple[int, ErrorPattern, str], ChallengeFinding] = {}

    def add(finding: ChallengeFinding) -> None:
        key = (finding.step_index, finding.pattern, finding.nl_condition)
        if key in merged:
            existing = merged[key]
            merged[key] = ChallengeFinding(
                step_index=existing.step_index,
                pattern=existing.pattern,
                evidence=existing.evidence + finding.evidence,
                phase=existing.phase,
                nl_condition=existing.nl_condition,
                predicate=existing.predicate,
                grounding=existing.grounding,
            )
        else:
            merged[key] = finding

    for run_id, trace, task in failed:
        resolve = resolve_for(run_id)
        hint = 0
        for index, event in enumerate(trace.events):
            pattern = _classify(event)
            if pattern is None:
                continue
            before = resolve(event.snapshot_before_ref)
            step = _nearest_step(skeleton, before.page_path(), hint)
            hint = step
            evidence = (Evidence(run_id, index),)
            target = event.command.target or event.command.url
            if pattern is ErrorPattern.INTERCEPTED:
                add(
                    ChallengeFinding(
                        step_index=step,
                        pattern=pattern,
                        evidence=evidence,
                        phase=Phase.PRE,
                        nl_condition="no overlay is blocking the page",
                        predicate=Predicate.no_overlay(),
                    )
                )
            elif pattern is ErrorPattern.NOT_LOADED:
                next_step = min(step + 1, len(skeleton.steps) - 1)
                page = skeleton.steps[next_step].page or before.page_path()
                add(
                    ChallengeFinding(
                        step_index=next_step,
                        pattern=pattern,
                        evidence=evidence,
                        phase=Phase.PRE,
                        nl_condition=f"the {page} page is loaded",
                        predicate=Predicate.url_contains(page) if page else None,
                    )
                )
            elif pattern is ErrorPattern.INACTIVE:
                add(
                    ChallengeFinding(
                        step_index=step,
                        pattern=pattern,
                        evidence=evidence,
                        phase=Phase.PRE,
                        nl_condition=f'"{target}" is active and ready',
                        predicate=None,
                    )
                )
            elif pattern is ErrorPattern.NOT_LOCATED:
                add(
                    ChallengeFinding(
                        step_index=step,
                        pattern=pattern,
                        evidence=evidence,
                        phase=Phase.PRE,
                        nl_condition=f'"{target}" is present on the page',
                        predicate=None,
                    )
                )
            elif pattern is ErrorPattern.PARTIAL_ACTION:
                next_step = min(step + 1, len(skeleton.steps) - 1)
                page = skeleton.steps[next_step].page
                add(
                    ChallengeFinding(
                        step_index=step,
                        pattern=pattern,
                        evidence=evidence,
                        phase=Phase.POST,
                        nl_condition=f"the page moved on after {describe(event.command)}",
                        predicate=Predicate.url_contains(page) if page and next_step != step else None,
                    )
                )
        for finding in _wrong_value_findings(run_id, trace, task, skeleton, resolve):
            add(finding)

    ordered = sorted(
        merged.values(),
        key=lambda f: (f.step_index, f.phase.value, -len(f.evidence), f.nl_condition),
    )
    return ordered


# -- fallbacks from successful traces -----------------------------------------------------


def _page_groups(trace: TraceRecord, resolve: SnapshotResolver) -> list[tuple[str, list[int]]]:
    """Consecutive event indices grouped by the page they acted on."""
    groups: list[tuple[str, list[int]]] = []
    for index, event in enumerate(trace.events):
        page = resolve(event.snapshot_before_ref).page_path()
        if groups and groups[-1][0] == page:
            groups[-1][1].append(index)
        else:
            groups.append((page, [index]))
    return groups


def extract_fallbacks(
    successes: list[tuple[str, TraceRecord]],
    findings: list[ChallengeFinding],
    skeleton: PlanSkeleton,
    resolve_for: Callable[[str], SnapshotResolver],
) -> list[RecoveryFinding]:
    """For each challenged step, what did successful runs do about it?

    Two recovery shapes count as evidence: clicking an overlay away, and
    re-issuing a command after it had timed out (a retry that worked).
    Dismissals apply to every step troubled by an interception — the
    dismiss control looks the same wherever the overlay pops up — while
    retries stay with the load they were waiting on.  Candidates are ranked
    by how many successful runs used them; ties go to the run seen first."""
    steps_with_findings = sorted({f.step_index for f in findings})
    step_patterns: dict[int, set[ErrorPattern]] = {}
    for finding in findings:
        step_patterns.setdefault(finding.step_index, set()).add(finding.pattern)
    intercepted_steps = [
        s for s in steps_with_findings if ErrorPattern.INTERCEPTED in step_patterns[s]
    ]

    # candidate key: (step_index, canonical action text)
    counts: Counter[tuple[int, str]] = Counter()
    first_run: dict[tuple[int, str], str] = {}
    commands_by_key: dict[tuple[int, str], tuple[ActionCommand, ...]] = {}
    groundings_by_key: dict[tuple[int, str], tuple[dict | None, ...]] = {}

    for run_id, trace in successes:
        resolve = resolve_for(run_id)
        seen_this_run: set[tuple[int, str]] = set()
        hint = 0
        timed_out: list[ActionCommand] = []

        def note(
            step: int,
            event: ActionEvent,
            before: PageSnapshot,
            grounding: dict | None = None,
        ) -> None:
            if step not in steps_with_findings:
                return
            key = (step, describe(event.command))
            if key in seen_this_run:
                return
            counts[key] += 1
            seen_this_run.add(key)
            first_run.setdefault(key, run_id)
            commands_by_key.setdefault(key, (event.command,))
            groundings_by_key.setdefault(
                key, (grounding or grounding_of(event.command, before),)
            )

        for page, indices in _page_groups(trace, resolve):
            step = _nearest_step(skeleton, page, hint)
            hint = step
            for index in indices:
                event = trace.events[index]
                if event.status is not OutcomeStatus.OK:
                    if event.status is OutcomeStatus.TIMEOUT:
                        timed_out.append(event.command)
                    continue
                before = resolve(event.snapshot_before_ref)
                if _is_overlay_dismissal(event, before):
                    # the dismiss control is whichever overlay is up; record
                    # that so the runtime can retarget unseen overlay kinds
                    ordinal = next(
                        i
                        for i, o in enumerate(before.overlays)
                        if o.label == event.command.target
                    )
                    dismiss = {"role": OVERLAY_DISMISS_ROLE, "ordinal": ordinal}
                    for target in intercepted_steps:
                        note(target, event, before, dismiss)
                elif event.command in timed_out:
                    target = step
                    if ErrorPattern.NOT_LOADED in step_patterns.get(step + 1, set()):
                        target = step + 1
                    note(target, event, before)

    recoveries = []
    ordered_keys = list(first_run)
    for step in steps_with_findings:
        keys = [k for k in counts if k[0] == step]
        keys.sort(key=lambda k: (-counts[k], ordered_keys.index(k)))
        for key in keys:
            recoveries.append(
                RecoveryFinding(
                    step_index=step,
                    source_run_id=first_run[key],
                    description=key[1],
                    commands=commands_by_key[key],
                    support=counts[key],
                    groundings=groundings_by_key[key],
                )
            )
    return recoveries


# -- assembly ----------------------------------------------------------------------------


def assemble_workflow(
    skeleton: PlanSkeleton,
    findings: list[ChallengeFinding],
    recoveries: list[RecoveryFinding],
    bindings: dict[str, str],
    *,
    family_id: str,
    run_ids: tuple[str, ...] = (),
) -> WorkflowDoc:
    """One unit per skeleton step; guards attach only where evidence points.

    Checks are capped at three per phase (most evidence first), fallbacks at
    three ranks (most support first).  The result is genericized with the
    source task's bindings so slot values transfer, and must validate."""
    for finding in findings:
        if not (0 <= finding.step_index < len(skeleton.steps)):
            raise IndexOutOfRange(f"finding step {finding.step_index} outside skeleton")
    for recovery in recoveries:
        if not (0 <= recovery.step_index < len(skeleton.steps)):
            raise IndexOutOfRange(f"recovery step {recovery.step_index} outside skeleton")

    units = []
    for index, step in enumerate(skeleton.steps):
        pre = []
        post = []
        for finding in findings:
            if finding.step_index != index:
                continue
            extra = {
                "pattern": finding.pattern.value,
                "evidence": [e.to_json() for e in finding.evidence],
            }
            if finding.grounding is not None:
                extra["grounding"] = finding.grounding
            check = ConditionCheck(
                check_id=content_id("chk", index, finding.phase.value, finding.nl_condition),
                phase=finding.phase,
                nl_text=finding.nl_condition,
                predicate=finding.predicate,
                extra=extra,
            )
            (pre if finding.phase is Phase.PRE else post).append((len(finding.evidence), check))
        pre.sort(key=lambda pair: -pair[0])
        post.sort(key=lambda pair: -pair[0])

        fallbacks = []
        rank = 0
        for recovery in recoveries:
            if recovery.step_index != index or rank >= MAX_FALLBACKS:
                continue
            rank += 1
            fallbacks.append(
                FallbackAction(
                    fallback_id=content_id("fb", index, rank, recovery.description),
                    rank=rank,
                    nl_text=f"Retry by doing: {recovery.description}",
                    commands=recovery.commands,
                    extra={
                        "source_run_id": recovery.source_run_id,
                        "support": recovery.support,
                        "groundings": list(recovery.groundings),
                    },
                )
            )

        units.append(
            StepUnit(
                index=index,
                action_text=step.action_text,
                pre_checks=tuple(check for _, check in pre[:MAX_CHECKS_PER_PHASE]),
                post_checks=tuple(check for _, check in post[:MAX_CHECKS_PER_PHASE]),
                fallbacks=tuple(fallbacks),
                extra={"page": step.page, "groundings": list(step.groundings)},
            )
        )

    doc = WorkflowDoc(
        workflow_id=content_id("wf", family_id, *[u.action_text for u in units]),
        family_id=family_id,
        version=1,
        units=tuple(units),
        provenance=Provenance(run_ids=run_ids),
    )
    doc = genericize(doc, bindings)
    violations = validate_workflow(doc)
    if violations:
        raise ValueError(f"assembled workflow does not validate: {violations[0]}")
    return doc


# -- end-to-end -----------------------------------------------------------------------


def _run_id_of(trace_ref: str) -> str:
    parts = trace_ref.split("/")
    return parts[3] if len(parts) >= 4 else trace_ref


def synth_family(
    ledger: RunLedger,
    store: Store,
    *,
    gateway: Gateway | None = None,
) -> WorkflowDoc:
    """The full pipeline for one family: pick the seed trace, learn the
    skeleton, extract checks and fallbacks, assemble, persist — along with a
    synthesis report of findings, evidence, and drop reasons."""
    family = ledger.family_id
    if not ledger.successful_traces:
        raise NoSuccessfulRun(f"family {family} has no successful run to learn from")

    def resolver(run_id: str) -> SnapshotResolver:
        return lambda ref: store.load_snapshot(family, run_id, ref)

    successes: list[tuple[str, TraceRecord]] = []
    for ref in ledger.successful_traces:
        run_id = _run_id_of(ref)
        successes.append((run_id, store.load_trace(family, run_id)))
    failed: list[tuple[str, TraceRecord, TaskSpec]] = []
    for ref in ledger.failed_traces:
        run_id = _run_id_of(ref)
        record = store.load_run_record(family, run_id)
        failed.append((run_id, store.load_trace(family, run_id), record.task))

    seed_index = min(
        range(len(successes)), key=lambda i: (len(successes[i][1].events), i)
    )
    seed_run_id, seed_trace = successes[seed_index]
    seed_record = store.load_run_record(family, seed_run_id)

    skeleton = learn_plan(
        seed_trace,
        resolver(seed_run_id),
        gateway=gateway,
        task_text=seed_record.task.rendered(),
    )
    findings = extract_condition_checks(failed, skeleton, resolver)
    recoveries = extract_fallbacks(successes, findings, skeleton, resolver)
    evidence_runs = sorted(
        {seed_run_id}
        | {e.run_id for f in findings for e in f.evidence}
        | {r.source_run_id for r in recoveries}
    )
    doc = assemble_workflow(
        skeleton,
        findings,
        recoveries,
        seed_record.task.bindings,
        family_id=family,
        run_ids=tuple(evidence_runs),
    )
    store.save_workflow(doc)

    steps_with_findings = {f.step_index for f in findings}
    steps_with_recoveries = {r.step_index for r in recoveries}
    report = {
        "family_id": family,
        "workflow_id": doc.workflow_id,
        "seed_run_id": seed_run_id,
        "skeleton": skeleton.descriptions,
        "findings": [f.to_json() for f in findings],
        "recoveries": [r.to_json() for r in recoveries],
        "dropped": [
            {
                "step_index": step,
                "reason": "NoRecoveryEvidence",
                "detail": "checks kept; no successful run showed a recovery here",
            }
            for step in sorted(steps_with_findings - steps_with_recoveries)
        ],
    }
    from .store import canonical_json_bytes, _atomic_write

    _atomic_write(
        store.workflow_dir(doc.workflow_id) / "synthesis_report.json",
        canonical_json_bytes(report),
    )
    return doc
