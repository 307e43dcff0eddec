"""Outcome judging and score aggregation.

The oracle judge replays a finished run inside the simulator and asks the
site's own goal predicates whether the task was accomplished — ground
truth, independent of any model.  A run that never submitted an answer is
Aborted; a run that answered but left the goal unmet is a Failure.

Aggregation is exact: success rates are kept as `fractions.Fraction`
until the moment they are rendered, so summaries are reproducible and
permutation-invariant.  Spread is always the population standard
deviation (divide by N, not N-1): each cell describes the tasks actually
measured, not a sample from a larger pool.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction

from .simweb import SimWeb
from .store import RunLabel, RunRecord, Store, TraceRecord

#: Column order for benchmark reports: baselines first, guarded last.
CONDITIONS = ("task_only", "trace_replay", "plan_guided", "guarded")

JUDGE_SNAPSHOT_COUNT = 3


class NotSimRun(RuntimeError):
    """The run carries no simulator session reference, so it cannot be replayed."""


class EmptyInput(ValueError):
    """A summary was requested over zero tasks or zero runs."""


class DegenerateReference(ValueError):
    """Reference labels are all one class; chance-corrected agreement is undefined."""


class GridMismatch(ValueError):
    """Benchmark results do not cover the same (task, run) grid in every condition."""


# ---------------------------------------------------------------------------
# Judging
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeDecision:
    """One judge's verdict on one run."""

    run_id: str
    success: bool
    rationale: str
    judged_by: str  # "oracle" | "model_judge" | "human"

    def __post_init__(self) -> None:
        if self.judged_by == "model_judge" and not self.rationale.strip():
            raise ValueError("a model judge must state its rationale")

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "success": self.success,
            "rationale": self.rationale,
            "judged_by": self.judged_by,
        }


def oracle_judge(record: RunRecord, trace: TraceRecord | None) -> tuple[RunLabel, str, str]:
    """Label a run by replaying it and evaluating the goal. Returns
    (label, rationale, judged_by)."""
    from .sites import SITES  # local import: sites also imports nothing from here

    ref = record.session_ref
    if not ref:
        return RunLabel.ABORTED, "no session reference was recorded", "oracle"
    env = SimWeb.restore(SITES[ref["site_id"]], ref)
    try:
        ok, rationale = env.goal_satisfied()
    finally:
        env.close()
    if ok:
        return RunLabel.SUCCESS, rationale, "oracle"
    if record.answer:
        return RunLabel.FAILURE, rationale, "oracle"
    return RunLabel.ABORTED, f"run ended without an answer; {rationale}", "oracle"


def judge_oracle(record: RunRecord) -> JudgeDecision:
    """Ground-truth verdict: replay the finished session and ask the site's
    own goal predicates.  Deterministic — same record, same decision."""
    if not record.session_ref:
        raise NotSimRun(f"run {record.run_id} has no session reference to replay")
    label, rationale, judged_by = oracle_judge(record, None)
    return JudgeDecision(
        run_id=record.run_id,
        success=label is RunLabel.SUCCESS,
        rationale=rationale,
        judged_by=judged_by,
    )


def judge_snapshot_refs(refs: Sequence[str]) -> tuple[str, ...]:
    """The screenshots a model judge looks at: the last three of the run,
    padded by repeating the earliest available when the run was shorter."""
    if not refs:
        raise EmptyInput("no snapshots recorded; nothing for a judge to look at")
    tail = list(refs[-JUDGE_SNAPSHOT_COUNT:])
    while len(tail) < JUDGE_SNAPSHOT_COUNT:
        tail.insert(0, refs[0])
    return tuple(tail)


def trace_snapshot_refs(trace: TraceRecord) -> tuple[str, ...]:
    """Per-step screenshots of a recorded trace, in execution order."""
    return tuple(e.snapshot_after_ref for e in trace.events if e.snapshot_after_ref)


def judge_model(record: RunRecord, snapshot_refs: Sequence[str], gateway) -> JudgeDecision:
    """Model verdict from the task text, the submitted answer, and the final
    screenshots.  A reply that does not start with yes/no is a failure with
    an explicit rationale, never a crash."""
    from .gateway import Unparseable, parse_yes_no

    refs = judge_snapshot_refs(snapshot_refs)
    reply = gateway.ask(
        "judge",
        {"task_text": record.task.rendered(), "answer": record.answer},
        image_refs=refs,
    )
    try:
        verdict = parse_yes_no(reply.text)
    except Unparseable:
        return JudgeDecision(
            run_id=record.run_id,
            success=False,
            rationale="unparseable judge reply",
            judged_by="model_judge",
        )
    rationale = verdict.explanation or reply.text.strip()
    return JudgeDecision(
        run_id=record.run_id,
        success=verdict.verdict,
        rationale=rationale,
        judged_by="model_judge",
    )


# ---------------------------------------------------------------------------
# Success-rate summaries
# ---------------------------------------------------------------------------


def percent(value: Fraction | float) -> str:
    """Render a rate as a 1-decimal percentage, e.g. Fraction(3, 5) -> '60.0%'."""
    return f"{float(value) * 100:.1f}%"


@dataclass(frozen=True)
class SuccessRateSummary:
    """Mean and spread of per-task success rates, kept exact until rendered."""

    per_task: tuple[tuple[str, Fraction], ...]
    mean: Fraction
    variance: Fraction

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    @property
    def task_count(self) -> int:
        return len(self.per_task)

    def rendered(self) -> str:
        return f"{percent(self.mean)} ± {percent(self.std)}"

    def to_json(self) -> dict:
        return {
            "per_task": {key: str(rate) for key, rate in self.per_task},
            "mean": str(self.mean),
            "variance": str(self.variance),
            "mean_float": float(self.mean),
            "std_float": self.std,
            "rendered": self.rendered(),
        }


def sr_summary(groups: Mapping[str, Iterable[bool]]) -> SuccessRateSummary:
    """Success rates per task, their mean, and the population spread.

    Each task's rate is successes/runs as an exact fraction; the mean
    averages tasks (not runs), so tasks with different run counts still
    weigh equally.  Raises EmptyInput on zero tasks or a task with zero
    runs."""
    if not groups:
        raise EmptyInput("success-rate summary needs at least one task")
    per_task: list[tuple[str, Fraction]] = []
    for key in sorted(groups):
        outcomes = list(groups[key])
        if not outcomes:
            raise EmptyInput(f"task {key!r} has no runs")
        per_task.append((key, Fraction(sum(bool(o) for o in outcomes), len(outcomes))))
    mean = sum((rate for _, rate in per_task), Fraction(0)) / len(per_task)
    variance = sum(((rate - mean) ** 2 for _, rate in per_task), Fraction(0)) / len(per_task)
    return SuccessRateSummary(per_task=tuple(per_task), mean=mean, variance=variance)


def label_outcome(label: RunLabel) -> bool:
    """Collapse a run label to success/not: Failure and Aborted both count
    as unsuccessful.  Unlabeled runs are a caller error."""
    if label is RunLabel.UNSET:
        raise EmptyInput("run is unlabeled; judge it before aggregating")
    return label is RunLabel.SUCCESS


def task_key(record: RunRecord) -> str:
    """Stable grouping key: same template + bindings = same task."""
    pairs = ",".join(f"{k}={v}" for k, v in sorted(record.task.bindings.items()))
    return f"{record.task.family_id}|{record.task.template}|{pairs}"


def sr_from_records(records: Iterable[RunRecord]) -> SuccessRateSummary:
    """Summarize labeled run records, grouped by task identity."""
    groups: dict[str, list[bool]] = {}
    for record in records:
        groups.setdefault(task_key(record), []).append(label_outcome(record.label))
    return sr_summary(groups)


# ---------------------------------------------------------------------------
# Judge agreement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgreementStats:
    """How closely a judge tracks reference labels on the same runs."""

    true_positive: int
    false_positive: int
    false_negative: int
    true_negative: int

    @property
    def total(self) -> int:
        return self.true_positive + self.false_positive + self.false_negative + self.true_negative

    @property
    def accuracy(self) -> Fraction:
        return Fraction(self.true_positive + self.true_negative, self.total)

    @property
    def precision(self) -> Fraction:
        predicted = self.true_positive + self.false_positive
        return Fraction(self.true_positive, predicted) if predicted else Fraction(0)

    @property
    def recall(self) -> Fraction:
        actual = self.true_positive + self.false_negative
        return Fraction(self.true_positive, actual) if actual else Fraction(0)

    @property
    def f1(self) -> Fraction:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else Fraction(0)

    @property
    def kappa(self) -> Fraction:
        """Chance-corrected agreement with expected agreement taken from the
        marginal products."""
        n = self.total
        observed = Fraction(self.true_positive + self.true_negative, n)
        judge_yes = self.true_positive + self.false_positive
        ref_yes = self.true_positive + self.false_negative
        expected = (
            Fraction(judge_yes * ref_yes, n * n)
            + Fraction((n - judge_yes) * (n - ref_yes), n * n)
        )
        if expected == 1:
            return Fraction(1) if observed == 1 else Fraction(0)
        return (observed - expected) / (1 - expected)

    def to_json(self) -> dict:
        return {
            "true_positive": self.true_positive,
            "false_positive": self.false_positive,
            "false_negative": self.false_negative,
            "true_negative": self.true_negative,
            "accuracy": float(self.accuracy),
            "precision": float(self.precision),
            "recall": float(self.recall),
            "f1": float(self.f1),
            "kappa": float(self.kappa),
        }


def agreement(judge: Sequence[bool], reference: Sequence[bool]) -> AgreementStats:
    """Confusion counts and derived scores for judge vs reference labels on
    the same runs, in the same order.  Raises DegenerateReference when the
    reference is all one class (chance correction would divide by zero and
    precision/recall lose meaning)."""
    if len(judge) != len(reference):
        raise ValueError(f"label lists differ in length: {len(judge)} vs {len(reference)}")
    if not judge:
        raise EmptyInput("agreement needs at least one labeled run")
    if len(set(reference)) < 2:
        raise DegenerateReference("reference labels are all one class")
    tp = sum(1 for j, r in zip(judge, reference) if j and r)
    fp = sum(1 for j, r in zip(judge, reference) if j and not r)
    fn = sum(1 for j, r in zip(judge, reference) if not j and r)
    tn = sum(1 for j, r in zip(judge, reference) if not j and not r)
    return AgreementStats(true_positive=tp, false_positive=fp, false_negative=fn, true_negative=tn)


# ---------------------------------------------------------------------------
# Benchmark report
# ---------------------------------------------------------------------------

#: results shape: family -> condition -> task key -> run outcomes in seed order.
BenchResults = Mapping[str, Mapping[str, Mapping[str, Sequence[bool]]]]


@dataclass(frozen=True)
class BenchReport:
    """Success-rate grid across task families and run conditions."""

    bench_id: str
    rows: tuple[tuple[str, tuple[tuple[str, SuccessRateSummary], ...]], ...]
    aggregate: tuple[tuple[str, SuccessRateSummary], ...]
    deltas: tuple[tuple[str, Fraction], ...]
    conditions: tuple[str, ...] = CONDITIONS
    csv_text: str = field(default="", compare=False)
    md_text: str = field(default="", compare=False)

    def to_json(self) -> dict:
        return {
            "bench_id": self.bench_id,
            "conditions": list(self.conditions),
            "rows": {
                family: {cond: cell.to_json() for cond, cell in cells}
                for family, cells in self.rows
            },
            "aggregate": {cond: cell.to_json() for cond, cell in self.aggregate},
            "deltas": {cond: float(delta) for cond, delta in self.deltas},
        }


def _check_grid(results: BenchResults, conditions: Sequence[str]) -> None:
    if not results:
        raise EmptyInput("benchmark results cover no task families")
    want = set(conditions)
    for family, by_condition in results.items():
        have = set(by_condition)
        if have != want:
            raise GridMismatch(
                f"family {family!r} has conditions {sorted(have)}, expected {sorted(want)}"
            )
        shapes = {
            cond: {key: len(runs) for key, runs in by_condition[cond].items()}
            for cond in conditions
        }
        first = shapes[conditions[0]]
        for cond, shape in shapes.items():
            if shape != first:
                raise GridMismatch(
                    f"family {family!r} condition {cond!r} covers a different "
                    f"(task, run) grid than {conditions[0]!r}"
                )


def bench_report(
    bench_id: str,
    results: BenchResults,
    *,
    conditions: Sequence[str] = CONDITIONS,
    store: Store | None = None,
) -> BenchReport:
    """Build the benchmark grid: one row per task family, one column per
    condition, each cell mean ± population std over that family's per-task
    success rates; a footer aggregates across every task and states the
    guarded condition's lead over each baseline.  All conditions must cover
    the identical (task, run) grid, else GridMismatch.  Pass a store to
    also write reports/{bench_id}/summary.csv and summary.md."""
    conditions = tuple(conditions)
    _check_grid(results, conditions)

    rows = tuple(
        (
            family,
            tuple((cond, sr_summary(results[family][cond])) for cond in conditions),
        )
        for family in sorted(results)
    )

    pooled: dict[str, dict[str, Sequence[bool]]] = {cond: {} for cond in conditions}
    for family in results:
        for cond in conditions:
            for key, runs in results[family][cond].items():
                pooled[cond][f"{family}|{key}"] = runs
    aggregate = tuple((cond, sr_summary(pooled[cond])) for cond in conditions)

    by_condition = dict(aggregate)
    deltas = tuple(
        (cond, by_condition["guarded"].mean - by_condition[cond].mean)
        for cond in conditions
        if cond != "guarded" and "guarded" in by_condition
    )

    csv_text = _render_csv(rows, aggregate, conditions)
    md_text = _render_md(bench_id, rows, aggregate, deltas, conditions)
    report = BenchReport(
        bench_id=bench_id,
        rows=rows,
        aggregate=aggregate,
        deltas=deltas,
        conditions=conditions,
        csv_text=csv_text,
        md_text=md_text,
    )
    if store is not None:
        store.write_bench_report(
            bench_id, csv_text=csv_text, md_text=md_text, data=report.to_json()
        )
    return report


def _render_csv(rows, aggregate, conditions) -> str:
    import csv
    import io

    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["family", *conditions])
    for family, cells in rows:
        writer.writerow([family, *(summary.rendered() for _, summary in cells)])
    writer.writerow(["all-tasks", *(summary.rendered() for _, summary in aggregate)])
    return out.getvalue()


def _render_md(bench_id, rows, aggregate, deltas, conditions) -> str:
    lines = [
        f"# Benchmark report: {bench_id}",
        "",
        "| family | " + " | ".join(conditions) + " |",
        "|" + "---|" * (len(conditions) + 1),
    ]
    for family, cells in rows:
        lines.append(
            f"| {family} | " + " | ".join(summary.rendered() for _, summary in cells) + " |"
        )
    lines.append(
        "| **all tasks** | "
        + " | ".join(f"**{summary.rendered()}**" for _, summary in aggregate)
        + " |"
    )
    lines.append("")
    for cond, delta in deltas:
        lines.append(f"- guarded − {cond}: {float(delta) * 100:+.1f} pp")
    lines.extend(
        [
            "",
            "Each cell is the mean ± population standard deviation of per-task",
            "success rates within that family; tasks weigh equally regardless of",
            "run count.  The footer row pools every task across families the same",
            "way.  Deltas compare aggregate means in percentage points.",
        ]
    )
    return "\n".join(lines) + "\n"
