"""File-backed store for runs, traces, snapshots, ledgers, workflows, reports.

Everything is plain, inspectable files.  Deterministic artifacts (traces,
run records, ledgers, workflow documents, benchmark reports) are written as
canonical JSON — sorted keys, two-space indent, trailing newline, and no
timestamps — so re-running a pipeline with the same inputs reproduces the
same bytes.  Writes go through a temp-file-then-rename step so readers never
observe partial files.

Layout under the store root:
    families/{family}/runs/{run_id}/trace.jsonl
    families/{family}/runs/{run_id}/run.json
    families/{family}/runs/{run_id}/snapshots/{digest}.png (+ .json)
    families/{family}/ledger.json
    workflows/{workflow_id}/v{version}.json
    runs/{run_id}/checkpoint.json | notification.json | events.jsonl | report.json
    reports/{bench_id}/summary.csv | summary.md
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .actions import ActionCommand
from .env import OutcomeStatus, PageSnapshot, render_screenshot_png
from .model import TaskSpec, WorkflowDoc
from .serialize import parse, serialize


class RunLabel(str, Enum):
    UNSET = "unset"
    SUCCESS = "success"
    FAILURE = "failure"
    ABORTED = "aborted"


@dataclass(frozen=True)
class ActionEvent:
    """One executed command inside a trace."""

    step_index: int
    command: ActionCommand
    status: OutcomeStatus
    message: str
    snapshot_before_ref: str
    snapshot_after_ref: str

    def to_json(self) -> dict:
        return {
            "step_index": self.step_index,
            "command": self.command.to_json(),
            "status": self.status.value,
            "message": self.message,
            "snapshot_before_ref": self.snapshot_before_ref,
            "snapshot_after_ref": self.snapshot_after_ref,
        }

    @classmethod
    def from_json(cls, data: dict) -> ActionEvent:
        return cls(
            step_index=data["step_index"],
            command=ActionCommand.from_json(data["command"]),
            status=OutcomeStatus(data["status"]),
            message=data["message"],
            snapshot_before_ref=data["snapshot_before_ref"],
            snapshot_after_ref=data["snapshot_after_ref"],
        )


@dataclass(frozen=True)
class TraceRecord:
    events: tuple[ActionEvent, ...]

    def validate(self) -> list[str]:
        problems = []
        for position, event in enumerate(self.events):
            if event.step_index != position:
                problems.append(f"step_index {event.step_index} at position {position} is not contiguous")
        return problems

    def ok_events(self) -> tuple[ActionEvent, ...]:
        return tuple(e for e in self.events if e.status is OutcomeStatus.OK)


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    task: TaskSpec
    policy_name: str
    label: RunLabel = RunLabel.UNSET
    trace_ref: str = ""
    rationale: str = ""
    judged_by: str = ""
    seed: int = 0
    session_ref: dict = field(default_factory=dict)
    answer: str = ""

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "task": self.task.to_json(),
            "policy_name": self.policy_name,
            "label": self.label.value,
            "trace_ref": self.trace_ref,
            "rationale": self.rationale,
            "judged_by": self.judged_by,
            "seed": self.seed,
            "session_ref": self.session_ref,
            "answer": self.answer,
        }

    @classmethod
    def from_json(cls, data: dict) -> RunRecord:
        return cls(
            run_id=data["run_id"],
            task=TaskSpec.from_json(data["task"]),
            policy_name=data["policy_name"],
            label=RunLabel(data["label"]),
            trace_ref=data.get("trace_ref", ""),
            rationale=data.get("rationale", ""),
            judged_by=data.get("judged_by", ""),
            seed=data.get("seed", 0),
            session_ref=data.get("session_ref", {}),
            answer=data.get("answer", ""),
        )


@dataclass(frozen=True)
class LedgerRow:
    task: TaskSpec
    successes: int
    failures: int
    aborted: int

    @property
    def total(self) -> int:
        return self.successes + self.failures + self.aborted

    def to_json(self) -> dict:
        return {
            "task": self.task.to_json(),
            "successes": self.successes,
            "failures": self.failures,
            "aborted": self.aborted,
            "total": self.total,
        }


@dataclass(frozen=True)
class RunLedger:
    family_id: str
    rows: tuple[LedgerRow, ...]
    successful_traces: tuple[str, ...]
    failed_traces: tuple[str, ...]

    def validate(self) -> list[str]:
        problems = []
        for row in self.rows:
            if min(row.successes, row.failures, row.aborted) < 0:
                problems.append(f"negative count in row for {row.task.rendered()[:40]!r}")
        total_runs = sum(row.total for row in self.rows)
        partitioned = len(self.successful_traces) + len(self.failed_traces)
        if total_runs != partitioned:
            problems.append(f"{total_runs} runs counted but {partitioned} traces partitioned")
        if sum(row.successes for row in self.rows) != len(self.successful_traces):
            problems.append("successes do not match successful trace count")
        return problems

    def to_json(self) -> dict:
        return {
            "family_id": self.family_id,
            "rows": [row.to_json() for row in self.rows],
            "successful_traces": list(self.successful_traces),
            "failed_traces": list(self.failed_traces),
        }

    @classmethod
    def from_json(cls, data: dict) -> RunLedger:
        return cls(
            family_id=data["family_id"],
            rows=tuple(
                LedgerRow(
                    task=TaskSpec.from_json(r["task"]),
                    successes=r["successes"],
                    failures=r["failures"],
                    aborted=r["aborted"],
                )
                for r in data["rows"]
            ),
            successful_traces=tuple(data["successful_traces"]),
            failed_traces=tuple(data["failed_traces"]),
        )


class StoreError(RuntimeError):
    """A store path is missing or holds malformed content."""


def canonical_json_bytes(data: object) -> bytes:
    return (json.dumps(data, sort_keys=True, ensure_ascii=False, indent=2) + "\n").encode("utf-8")


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except FileNotFoundError:
            pass
        raise


class Store:
    """One store root; all paths below are derived from it."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    # -- families / exploration runs -----------------------------------------

    def family_dir(self, family_id: str) -> Path:
        return self.root / "families" / family_id

    def save_task(self, task: TaskSpec) -> Path:
        """Persist a family's seed task."""
        path = self.family_dir(task.family_id) / "task.json"
        _atomic_write(path, canonical_json_bytes(task.to_json()))
        return path

    def load_task(self, family_id: str) -> TaskSpec:
        path = self.family_dir(family_id) / "task.json"
        if not path.exists():
            raise StoreError(f"no task registered for family {family_id}")
        return TaskSpec.from_json(json.loads(path.read_text("utf-8")))

    def run_dir(self, family_id: str, run_id: str) -> Path:
        return self.family_dir(family_id) / "runs" / run_id

    def save_snapshot(self, family_id: str, run_id: str, snapshot: PageSnapshot) -> str:
        """Persist a snapshot (structure + image), content-addressed; returns its ref."""
        ref = snapshot.screenshot_ref
        snap_dir = self.run_dir(family_id, run_id) / "snapshots"
        json_path = snap_dir / f"{ref}.json"
        if not json_path.exists():
            _atomic_write(json_path, canonical_json_bytes(snapshot.to_json()))
            _atomic_write(snap_dir / f"{ref}.png", render_screenshot_png(snapshot))
        return ref

    def load_snapshot(self, family_id: str, run_id: str, ref: str) -> PageSnapshot:
        path = self.run_dir(family_id, run_id) / "snapshots" / f"{ref}.json"
        if not path.exists():
            raise StoreError(f"snapshot {ref} not found for run {run_id}")
        return PageSnapshot.from_json(json.loads(path.read_text("utf-8")))

    def snapshot_png_path(self, family_id: str, run_id: str, ref: str) -> Path:
        return self.run_dir(family_id, run_id) / "snapshots" / f"{ref}.png"

    def save_trace(self, family_id: str, run_id: str, trace: TraceRecord) -> str:
        problems = trace.validate()
        if problems:
            raise StoreError(f"refusing to store malformed trace: {problems[0]}")
        lines = b"".join(
            json.dumps(event.to_json(), sort_keys=True, ensure_ascii=False).encode("utf-8") + b"\n"
            for event in trace.events
        )
        _atomic_write(self.run_dir(family_id, run_id) / "trace.jsonl", lines)
        return f"families/{family_id}/runs/{run_id}/trace.jsonl"

    def load_trace(self, family_id: str, run_id: str) -> TraceRecord:
        path = self.run_dir(family_id, run_id) / "trace.jsonl"
        if not path.exists():
            raise StoreError(f"trace not found for run {run_id}")
        events = tuple(
            ActionEvent.from_json(json.loads(line))
            for line in path.read_text("utf-8").splitlines()
            if line.strip()
        )
        return TraceRecord(events)

    def save_run_record(self, family_id: str, record: RunRecord) -> None:
        _atomic_write(
            self.run_dir(family_id, record.run_id) / "run.json",
            canonical_json_bytes(record.to_json()),
        )

    def load_run_record(self, family_id: str, run_id: str) -> RunRecord:
        path = self.run_dir(family_id, run_id) / "run.json"
        if not path.exists():
            raise StoreError(f"run record not found: {family_id}/{run_id}")
        return RunRecord.from_json(json.loads(path.read_text("utf-8")))

    def list_runs(self, family_id: str) -> list[str]:
        runs_dir = self.family_dir(family_id) / "runs"
        if not runs_dir.exists():
            return []
        return sorted(p.name for p in runs_dir.iterdir() if p.is_dir())

    def trace_resolvable(self, family_id: str, run_id: str) -> list[str]:
        """Check the trace invariant: every snapshot ref resolves in the store."""
        problems = []
        trace = self.load_trace(family_id, run_id)
        problems.extend(trace.validate())
        snap_dir = self.run_dir(family_id, run_id) / "snapshots"
        for event in trace.events:
            for ref in (event.snapshot_before_ref, event.snapshot_after_ref):
                if not (snap_dir / f"{ref}.json").exists():
                    problems.append(f"step {event.step_index}: snapshot {ref} unresolvable")
                elif not (snap_dir / f"{ref}.png").exists():
                    problems.append(f"step {event.step_index}: snapshot image {ref} missing")
        return problems

    def save_ledger(self, ledger: RunLedger) -> Path:
        problems = ledger.validate()
        if problems:
            raise StoreError(f"refusing to store inconsistent ledger: {problems[0]}")
        path = self.family_dir(ledger.family_id) / "ledger.json"
        _atomic_write(path, canonical_json_bytes(ledger.to_json()))
        return path

    def load_ledger(self, family_id: str) -> RunLedger:
        path = self.family_dir(family_id) / "ledger.json"
        if not path.exists():
            raise StoreError(f"no ledger for family {family_id}")
        return RunLedger.from_json(json.loads(path.read_text("utf-8")))

    # -- workflows -------------------------------------------------------------

    def workflow_dir(self, workflow_id: str) -> Path:
        return self.root / "workflows" / workflow_id

    def save_workflow(self, doc: WorkflowDoc) -> Path:
        path = self.workflow_dir(doc.workflow_id) / f"v{doc.version}.json"
        _atomic_write(path, serialize(doc))
        return path

    def workflow_versions(self, workflow_id: str) -> list[int]:
        directory = self.workflow_dir(workflow_id)
        if not directory.exists():
            return []
        versions = []
        for path in directory.glob("v*.json"):
            try:
                versions.append(int(path.stem[1:]))
            except ValueError:
                continue
        return sorted(versions)

    def load_workflow(self, workflow_id: str, version: int | None = None) -> WorkflowDoc:
        versions = self.workflow_versions(workflow_id)
        if not versions:
            raise StoreError(f"no stored workflow {workflow_id}")
        if version is None:
            version = versions[-1]
        if version not in versions:
            raise StoreError(f"workflow {workflow_id} has no version {version}")
        raw = (self.workflow_dir(workflow_id) / f"v{version}.json").read_bytes()
        return parse(raw)

    def list_workflows(self) -> list[str]:
        directory = self.root / "workflows"
        if not directory.exists():
            return []
        return sorted(p.name for p in directory.iterdir() if p.is_dir())

    # -- service runs (guarded executions) --------------------------------------

    def run_state_dir(self, run_id: str) -> Path:
        return self.root / "runs" / run_id

    def save_checkpoint(self, run_id: str, data: dict) -> Path:
        path = self.run_state_dir(run_id) / "checkpoint.json"
        _atomic_write(path, canonical_json_bytes(data))
        return path

    def load_checkpoint(self, run_id: str) -> dict:
        path = self.run_state_dir(run_id) / "checkpoint.json"
        if not path.exists():
            raise StoreError(f"no checkpoint for run {run_id}")
        return json.loads(path.read_text("utf-8"))

    def save_notification(self, run_id: str, data: dict) -> Path:
        path = self.run_state_dir(run_id) / "notification.json"
        _atomic_write(path, canonical_json_bytes(data))
        return path

    def load_notification(self, run_id: str) -> dict:
        path = self.run_state_dir(run_id) / "notification.json"
        if not path.exists():
            raise StoreError(f"no notification for run {run_id}")
        return json.loads(path.read_text("utf-8"))

    def append_event(self, run_id: str, event: dict) -> None:
        path = self.run_state_dir(run_id) / "events.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        line = json.dumps(event, sort_keys=True, ensure_ascii=False) + "\n"
        with path.open("a", encoding="utf-8") as handle:
            handle.write(line)
            handle.flush()

    def read_events(self, run_id: str, after: int = 0) -> list[dict]:
        path = self.run_state_dir(run_id) / "events.jsonl"
        if not path.exists():
            return []
        events = []
        for line in path.read_text("utf-8").splitlines():
            if not line.strip():
                continue
            event = json.loads(line)
            if event.get("sequence", 0) > after:
                events.append(event)
        return events

    def save_run_report(self, run_id: str, data: dict) -> Path:
        path = self.run_state_dir(run_id) / "report.json"
        _atomic_write(path, canonical_json_bytes(data))
        return path

    def load_run_report(self, run_id: str) -> dict:
        path = self.run_state_dir(run_id) / "report.json"
        if not path.exists():
            raise StoreError(f"no report for run {run_id}")
        return json.loads(path.read_text("utf-8"))

    # -- benchmark reports -------------------------------------------------------

    def report_dir(self, bench_id: str) -> Path:
        return self.root / "reports" / bench_id

    def write_bench_report(self, bench_id: str, *, csv_text: str, md_text: str, data: dict) -> Path:
        directory = self.report_dir(bench_id)
        _atomic_write(directory / "summary.csv", csv_text.encode("utf-8"))
        _atomic_write(directory / "summary.md", md_text.encode("utf-8"))
        _atomic_write(directory / "report.json", canonical_json_bytes(data))
        return directory

    def load_bench_report(self, bench_id: str) -> dict:
        path = self.report_dir(bench_id) / "report.json"
        if not path.exists():
            raise StoreError(f"no benchmark report {bench_id}")
        return json.loads(path.read_text("utf-8"))


def read_labels_csv(path: str | Path) -> dict[str, bool]:
    """Parse a label import file; header must be exactly `run_id,success`."""
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise StoreError("label file is empty") from exc
        if [h.strip() for h in header] != ["run_id", "success"]:
            raise StoreError('label file must start with the header "run_id,success"')
        labels = {}
        for row in reader:
            if not row or not row[0].strip():
                continue
            if len(row) < 2:
                raise StoreError(f"label row for {row[0]!r} has no success column")
            value = row[1].strip().lower()
            if value not in ("true", "false", "1", "0", "yes", "no"):
                raise StoreError(f"label row for {row[0]!r} has non-boolean success {row[1]!r}")
            labels[row[0].strip()] = value in ("true", "1", "yes")
    return labels
