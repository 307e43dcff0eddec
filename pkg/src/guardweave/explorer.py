"""Task-family exploration: variations, repeated execution, labeled ledgers.

A family starts from one parameterized task.  Exploration derives up to
three minimal variants of it (one per variation axis), executes the
original and each variant a fixed number of times under a pluggable
policy, judges every run, and persists traces plus a per-family ledger
partitioning runs into successful and failed.

Everything is deterministic given (task, config): run ``i`` of task ``j``
draws its seed from ``stable_hash(base_seed, j, i)``, and the bundled
policies make every probabilistic choice through the same keyed hash.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Protocol

from .actions import ActionCommand, CommandKind, parse_action_text
from .env import ActionOutcome, Env, OutcomeStatus, PageSnapshot, ground_command
from .gateway import Gateway, Unparseable, extract_json
from .model import TaskSpec, VariationKind, WorkflowDoc, bind
from .simweb import SlotAxis, stable_hash
from .store import (
    ActionEvent,
    LedgerRow,
    RunLabel,
    RunLedger,
    RunRecord,
    Store,
    TraceRecord,
)

Judge = Callable[[RunRecord, TraceRecord], tuple[RunLabel, str, str]]

VARIATION_ORDER = (VariationKind.ATTRIBUTE, VariationKind.CATEGORY, VariationKind.WEBSITE)


@dataclass(frozen=True)
class ExplorationConfig:
    runs_per_task: int = 5
    max_steps_per_run: int = 40
    parallelism: int = 4
    base_seed: int = 0

    def __post_init__(self) -> None:
        if self.runs_per_task < 1:
            raise ValueError("runs_per_task must be >= 1")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")


def run_seed(base_seed: int, task_index: int, run_index: int) -> int:
    return stable_hash(base_seed, task_index, run_index)


class NoVariableSlots(RuntimeError):
    """The task has no slot that any variation axis could act on."""


@dataclass(frozen=True)
class VariationSet:
    """Generated variants, one per available axis; missing axes are listed
    in ``absent`` rather than invented."""

    variants: tuple[tuple[VariationKind, TaskSpec], ...]
    absent: tuple[VariationKind, ...] = ()

    def __iter__(self):
        return iter(self.variants)

    def __len__(self) -> int:
        return len(self.variants)

    def tasks(self) -> list[TaskSpec]:
        return [task for _, task in self.variants]


def _apply_swap(task: TaskSpec, kind: VariationKind, slot: str, value: str) -> TaskSpec:
    bindings = dict(task.bindings)
    bindings[slot] = value
    site = value if kind is VariationKind.WEBSITE else task.site
    return replace(task, bindings=bindings, site=site)


def _pick_deterministic(
    task: TaskSpec, kind: VariationKind, axes: Mapping[str, SlotAxis]
) -> tuple[str, str] | None:
    """First eligible (slot, new value) for this axis, by slot name."""
    names = set(task.slot_names())
    for slot in sorted(axes):
        axis = axes[slot]
        if axis.kind != kind.value or slot not in names:
            continue
        current = task.bindings.get(slot, "")
        for alternative in axis.alternatives:
            if alternative != current:
                return slot, alternative
    return None


def gen_variations(
    task: TaskSpec,
    axes: Mapping[str, SlotAxis] | None = None,
    *,
    gateway: Gateway | None = None,
) -> VariationSet:
    """Derive one minimal variant per variation axis.

    With a gateway, the variation prompt proposes the swaps; otherwise the
    slot table (defaulting to the task's site definition) is expanded
    deterministically.  An axis with nothing to vary is reported in
    ``absent`` instead of being fabricated.
    """
    if not task.slot_names():
        raise NoVariableSlots("task template has no slots to vary")
    if axes is None:
        from .sites import site_for_task

        axes = site_for_task(task).slot_axes

    proposals: dict[VariationKind, tuple[str, str] | None]
    if gateway is not None:
        proposals = _model_proposals(task, gateway)
    else:
        proposals = {kind: _pick_deterministic(task, kind, axes) for kind in VARIATION_ORDER}

    variants = []
    absent = []
    for kind in VARIATION_ORDER:
        picked = proposals.get(kind)
        if picked is None:
            absent.append(kind)
            continue
        slot, value = picked
        variants.append((kind, _apply_swap(task, kind, slot, value)))
    if not variants:
        raise NoVariableSlots("no variation axis applies to this task")
    return VariationSet(variants=tuple(variants), absent=tuple(absent))


def _model_proposals(task: TaskSpec, gateway: Gateway) -> dict[VariationKind, tuple[str, str] | None]:
    """Ask the model for one swap per axis; replies must be JSON of the form
    {"attribute": {"slot": ..., "value": ...} | null, "category": ..., "website": ...}."""
    reply = gateway.ask(
        "variation_task_generation",
        {
            "task_template": task.template,
            "task_bindings": ", ".join(f"<{k}> = {v}" for k, v in sorted(task.bindings.items())),
            "site": task.site,
        },
    )
    data = extract_json(reply.text)
    if not isinstance(data, dict):
        raise Unparseable("variation reply is not a JSON object")
    names = set(task.slot_names())
    proposals: dict[VariationKind, tuple[str, str] | None] = {}
    for kind in VARIATION_ORDER:
        entry = data.get(kind.value)
        if entry is None:
            proposals[kind] = None
            continue
        if not isinstance(entry, dict) or "slot" not in entry or "value" not in entry:
            raise Unparseable(f"variation axis {kind.value!r} is not a slot/value object")
        slot, value = str(entry["slot"]), str(entry["value"])
        if slot not in names:
            raise Unparseable(f"variation axis {kind.value!r} names unknown slot <{slot}>")
        if value == task.bindings.get(slot, ""):
            raise Unparseable(f"variation axis {kind.value!r} does not change <{slot}>")
        proposals[kind] = (slot, value)
    return proposals


# -- policies ------------------------------------------------------------------


class Policy(Protocol):
    """Chooses the next command from the current page; None aborts the run."""

    name: str

    def next_command(
        self, snapshot: PageSnapshot, last: ActionOutcome | None
    ) -> ActionCommand | None: ...


@dataclass
class TaskOnlyPolicy:
    """Baseline observe-act agent for the simulator: follows the canonical
    path for its task but is deliberately fallible, with every lapse drawn
    deterministically from the run seed.

    ``dismiss_rate``: chance it notices a blocking overlay before acting.
    ``retry_rate``: chance it retries after a failed action instead of
    giving up.  ``wrong_value_rate``/``skip_rate``: chances it fills a form
    field with a plausible wrong value or skips the field entirely.
    """

    plan: list[ActionCommand]
    axes: Mapping[str, SlotAxis]
    bindings: Mapping[str, str]
    seed: int
    dismiss_rate: float = 0.55
    retry_rate: float = 0.5
    wrong_value_rate: float = 0.06
    skip_rate: float = 0.04
    name: str = "task_only"
    _cursor: int = 0
    _draws: int = 0
    _pending: ActionCommand | None = None
    _resume_pending: bool = False

    def _draw(self, tag: str) -> float:
        self._draws += 1
        return (stable_hash(self.seed, "task-only", tag, self._draws) % 10_000_019) / 10_000_019.0

    def _wrong_value(self, slot_value: str) -> str | None:
        for slot, axis in sorted(self.axes.items()):
            if self.bindings.get(slot, "") == slot_value:
                for alternative in axis.alternatives:
                    if alternative != slot_value:
                        return alternative
        return None

    def next_command(
        self, snapshot: PageSnapshot, last: ActionOutcome | None
    ) -> ActionCommand | None:
        if self._resume_pending and last is not None and last.ok:
            # The overlay that blocked the pending command is gone; re-run it.
            self._resume_pending = False
            return self._pending
        if last is not None and not last.ok:
            # The previous attempt failed; either recover or give up.
            if self._draw("retry") >= self.retry_rate:
                return None
            if last.status is OutcomeStatus.INTERCEPTED and snapshot.overlays:
                self._resume_pending = True
                return ActionCommand.click(snapshot.overlays[0].label)
            return self._pending  # try the same planned command again

        if snapshot.overlays and self._draw("notice-overlay") < self.dismiss_rate:
            return ActionCommand.click(snapshot.overlays[0].label)

        while self._cursor < len(self.plan):
            command = self.plan[self._cursor]
            self._cursor += 1
            if command.kind in (CommandKind.TYPE_TEXT, CommandKind.SELECT):
                if self._draw("skip") < self.skip_rate:
                    continue  # forgets this field entirely
                if self._draw("wrong-value") < self.wrong_value_rate:
                    current = command.text if command.kind is CommandKind.TYPE_TEXT else command.option
                    wrong = self._wrong_value(current)
                    if wrong is not None:
                        if command.kind is CommandKind.TYPE_TEXT:
                            command = replace(command, text=wrong)
                        else:
                            command = replace(command, option=wrong)
            self._pending = command
            return command
        return None


@dataclass
class TraceReplayPolicy:
    """Replays a recorded command sequence verbatim; aborts on the first
    outcome that deviates from a clean run."""

    commands: tuple[ActionCommand, ...]
    name: str = "trace_replay"
    _cursor: int = 0

    @classmethod
    def from_trace(cls, trace: TraceRecord) -> TraceReplayPolicy:
        return cls(commands=tuple(event.command for event in trace.events))

    def next_command(
        self, snapshot: PageSnapshot, last: ActionOutcome | None
    ) -> ActionCommand | None:
        if last is not None and not last.ok:
            return None
        if self._cursor >= len(self.commands):
            return None
        command = self.commands[self._cursor]
        self._cursor += 1
        return command


@dataclass
class PlanGuidedPolicy:
    """Follows a workflow's step list with the guards stripped: no checks,
    no fallbacks, and it plows on even when an action fails.  Step targets
    resolve by label first, then by the recorded role-and-position hint, so
    the plan survives sites that word the same control differently."""

    commands: tuple[ActionCommand, ...]
    groundings: tuple[dict | None, ...] = ()
    name: str = "plan_guided"
    _cursor: int = 0

    @classmethod
    def from_workflow(cls, doc: WorkflowDoc, bindings: dict[str, str]) -> PlanGuidedPolicy:
        bound = bind(doc, bindings)
        commands: list[ActionCommand] = []
        groundings: list[dict | None] = []
        for unit in bound.units:
            clauses = parse_action_text(unit.action_text)
            hints = unit.extra.get("groundings", [])
            commands.extend(clauses)
            if len(hints) == len(clauses):
                groundings.extend(hints)
            else:
                groundings.extend([None] * len(clauses))
        return cls(commands=tuple(commands), groundings=tuple(groundings))

    def next_command(
        self, snapshot: PageSnapshot, last: ActionOutcome | None
    ) -> ActionCommand | None:
        if self._cursor >= len(self.commands):
            return None
        command = self.commands[self._cursor]
        grounding = self.groundings[self._cursor] if self.groundings else None
        self._cursor += 1
        return ground_command(command, grounding, snapshot)


def task_only_policy(task: TaskSpec, seed: int, **rates: float) -> TaskOnlyPolicy:
    """The default exploration policy for a simulator task."""
    from .sites import happy_path, site_for_task

    site = site_for_task(task)
    return TaskOnlyPolicy(
        plan=happy_path(site, task.bindings),
        axes=site.slot_axes,
        bindings=task.bindings,
        seed=seed,
        **rates,
    )


# -- execution -----------------------------------------------------------------


def execute_task(
    task: TaskSpec,
    env: Env,
    policy: Policy,
    *,
    seed: int,
    max_steps: int,
    store: Store,
    run_id: str,
) -> tuple[RunRecord, TraceRecord]:
    """Run one policy loop to completion and persist its trace.

    The label is left Unset — judging is a separate concern.
    """
    family = task.family_id
    snapshot = env.reset(seed)
    events: list[ActionEvent] = []
    last: ActionOutcome | None = None
    answer = ""
    for step in range(max_steps):
        command = policy.next_command(snapshot, last)
        if command is None:
            break
        before_ref = store.save_snapshot(family, run_id, snapshot)
        outcome = env.apply(command)
        after_ref = store.save_snapshot(family, run_id, outcome.after)
        events.append(
            ActionEvent(
                step_index=step,
                command=command,
                status=outcome.status,
                message=outcome.message,
                snapshot_before_ref=before_ref,
                snapshot_after_ref=after_ref,
            )
        )
        snapshot, last = outcome.after, outcome
        if command.kind is CommandKind.ANSWER and outcome.ok:
            answer = command.text
            break

    trace = TraceRecord(tuple(events))
    trace_ref = store.save_trace(family, run_id, trace)
    session_ref = env.session_ref() if hasattr(env, "session_ref") else {}
    record = RunRecord(
        run_id=run_id,
        task=task,
        policy_name=policy.name,
        label=RunLabel.UNSET,
        trace_ref=trace_ref,
        seed=seed,
        session_ref=session_ref,
        answer=answer,
    )
    store.save_run_record(family, record)
    return record, trace


PolicyFactory = Callable[[TaskSpec, int], Policy]


def explore_family(
    original: TaskSpec,
    config: ExplorationConfig,
    store: Store,
    *,
    judge: Judge,
    policy_factory: PolicyFactory | None = None,
    env_factory: Callable[[TaskSpec], Env] | None = None,
    gateway: Gateway | None = None,
    sequential: bool = False,
) -> RunLedger:
    """Explore one task family end to end: variations, repeated runs,
    judging, ledger.  Runs execute concurrently unless ``sequential``."""
    if policy_factory is None:
        policy_factory = task_only_policy
    if env_factory is None:
        from .sites import make_env

        env_factory = make_env

    variations = gen_variations(original, gateway=gateway)
    tasks = [original] + variations.tasks()
    jobs = [
        (j, i, task, run_seed(config.base_seed, j, i), f"{original.family_id}-explore-t{j}-r{i}")
        for j, task in enumerate(tasks)
        for i in range(config.runs_per_task)
    ]

    def run_one(job) -> tuple[int, int, RunRecord]:
        j, i, task, seed, run_id = job
        env = env_factory(task)
        try:
            record, trace = execute_task(
                task,
                env,
                policy_factory(task, seed),
                seed=seed,
                max_steps=config.max_steps_per_run,
                store=store,
                run_id=run_id,
            )
        finally:
            env.close()
        label, rationale, judged_by = judge(record, trace)
        record = replace(record, label=label, rationale=rationale, judged_by=judged_by)
        store.save_run_record(task.family_id, record)
        return j, i, record

    if sequential or config.parallelism == 1:
        results = [run_one(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            results = list(pool.map(run_one, jobs))

    by_position = {(j, i): record for j, i, record in results}
    rows = []
    successful: list[str] = []
    failed: list[str] = []
    for j, task in enumerate(tasks):
        counts = {RunLabel.SUCCESS: 0, RunLabel.FAILURE: 0, RunLabel.ABORTED: 0}
        for i in range(config.runs_per_task):
            record = by_position[(j, i)]
            counts[record.label] += 1
            (successful if record.label is RunLabel.SUCCESS else failed).append(record.trace_ref)
        rows.append(
            LedgerRow(
                task=task,
                successes=counts[RunLabel.SUCCESS],
                failures=counts[RunLabel.FAILURE],
                aborted=counts[RunLabel.ABORTED],
            )
        )
    ledger = RunLedger(
        family_id=original.family_id,
        rows=tuple(rows),
        successful_traces=tuple(successful),
        failed_traces=tuple(failed),
    )
    store.save_ledger(ledger)
    return ledger
