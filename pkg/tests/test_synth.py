"""Workflow synthesis: plans from clean runs, checks from failures,
fallbacks from recoveries, all evidence-bound.

Fixtures are hand-built traces over a tiny two-page site whose expected
skeletons, findings, and rankings are computed by hand in the asserts.
End-to-end cases run the real explorer first and then walk the provenance
chain of the assembled document back into the store.
"""

from __future__ import annotations

import json
from dataclasses import replace

import pytest

from guardweave.actions import ActionCommand, join_clauses, parse_action_text
from guardweave.env import (
    Element,
    Overlay,
    OutcomeStatus,
    Role,
    evaluate_predicate,
    make_snapshot,
)
from guardweave.explorer import ExplorationConfig, PlanGuidedPolicy, execute_task, explore_family
from guardweave.gateway import Gateway, ScriptedBackend
from guardweave.metrics import oracle_judge
from guardweave.model import Phase, Predicate, TaskSpec, validate_workflow
from guardweave.sites import FAMILY_SITES, SITES, default_task
from guardweave.simweb import SimWeb
from guardweave.store import ActionEvent, RunLedger, RunRecord, Store, TraceRecord
from guardweave.synth import (
    ChallengeFinding,
    EmptyTrace,
    ErrorPattern,
    Evidence,
    IndexOutOfRange,
    NoSuccessfulRun,
    RecoveryFinding,
    assemble_workflow,
    extract_condition_checks,
    extract_fallbacks,
    learn_plan,
    synth_family,
)

# -- a tiny hand-made site: /home form (Name, Mode, Go), /results summary --------

TASK = TaskSpec(
    family_id="tiny-quest",
    template="Run a <mode> lookup for <name>",
    bindings={"name": "Ada", "mode": "fast"},
    site="tiny-a",
)


def home_snapshot(*, name="", mode="", overlay=False, clock=0, skin="a"):
    labels = {"a": ("Name", "Mode", "Go"), "b": ("Who", "Speed", "Run it")}[skin]
    elements = (
        Element(element_id="banner", role=Role.TEXT, label="Tiny", text_value="welcome"),
        Element(element_id="name", role=Role.TEXTBOX, label=labels[0], text_value=name),
        Element(element_id="mode", role=Role.SELECT, label=labels[1], text_value=mode),
        Element(element_id="go", role=Role.BUTTON, label=labels[2]),
    )
    overlays = (Overlay(overlay_id="promo", label="Close it"),) if overlay else ()
    return make_snapshot(
        url=f"sim://tiny-{skin}/home", title="Tiny", elements=elements, overlays=overlays, clock=clock
    )


def results_snapshot(*, clock=0, skin="a"):
    elements = (
        Element(element_id="sum", role=Role.TEXT, label="result-summary", text_value="Ada (fast)"),
    )
    return make_snapshot(
        url=f"sim://tiny-{skin}/results", title="Tiny results", elements=elements, overlays=(), clock=clock
    )


class SnapshotBook:
    """In-memory snapshot resolver shared by a batch of hand-made traces."""

    def __init__(self):
        self.by_ref = {}

    def add(self, snapshot):
        self.by_ref[snapshot.screenshot_ref] = snapshot
        return snapshot.screenshot_ref

    def resolve(self, ref):
        return self.by_ref[ref]

    def resolve_for(self, run_id):
        return self.resolve


def make_events(book, steps):
    """steps: (command, status, before_snapshot, after_snapshot) tuples."""
    events = []
    for index, (command, status, before, after) in enumerate(steps):
        events.append(
            ActionEvent(
                step_index=index,
                command=command,
                status=status,
                message="synthetic",
                snapshot_before_ref=book.add(before),
                snapshot_after_ref=book.add(after),
            )
        )
    return TraceRecord(events=events)


OK = OutcomeStatus.OK


def clean_success_trace(book):
    h0 = home_snapshot()
    h1 = home_snapshot(name="Ada", clock=1)
    h2 = home_snapshot(name="Ada", mode="fast", clock=2)
    r = results_snapshot(clock=3)
    return make_events(
        book,
        [
            (ActionCommand.type_text("Name", "Ada"), OK, h0, h1),
            (ActionCommand.select("Mode", "fast"), OK, h1, h2),
            (ActionCommand.click("Go"), OK, h2, r),
            (ActionCommand.read("result-summary"), OK, r, r),
            (ActionCommand.answer("Ada (fast)"), OK, r, r),
        ],
    )


# -- plan learning ------------------------------------------------------------------


def test_plan_merges_consecutive_events_on_one_page():
    book = SnapshotBook()
    skeleton = learn_plan(clean_success_trace(book), book.resolve)
    # by hand: five events over exactly two pages -> two steps
    assert len(skeleton) == 2
    assert skeleton.steps[0].page == "/home"
    assert skeleton.steps[0].action_text == (
        'type "Ada" into "Name"; then select "fast" in "Mode"; then click "Go"'
    )
    assert skeleton.steps[1].page == "/results"
    assert skeleton.steps[1].action_text == (
        'read "result-summary"; then answer with "Ada (fast)"'
    )


def test_plan_records_role_and_position_for_each_clause():
    book = SnapshotBook()
    skeleton = learn_plan(clean_success_trace(book), book.resolve)
    assert skeleton.steps[0].groundings == (
        {"role": "textbox", "ordinal": 0},
        {"role": "select", "ordinal": 0},
        {"role": "button", "ordinal": 0},
    )
    # reading and answering are not element-targeted in the same way; reads
    # ground too, answers do not
    assert skeleton.steps[1].groundings[1] is None


def test_plan_skips_failed_attempts_and_overlay_dismissals():
    book = SnapshotBook()
    h0 = home_snapshot()
    h1o = home_snapshot(name="Ada", overlay=True, clock=1)
    h1 = home_snapshot(name="Ada", clock=2)
    h2 = home_snapshot(name="Ada", mode="fast", clock=3)
    r = results_snapshot(clock=4)
    trace = make_events(
        book,
        [
            (ActionCommand.type_text("Name", "Ada"), OK, h0, h1o),
            (ActionCommand.select("Mode", "fast"), OutcomeStatus.INTERCEPTED, h1o, h1o),
            (ActionCommand.click("Close it"), OK, h1o, h1),
            (ActionCommand.select("Mode", "fast"), OK, h1, h2),
            (ActionCommand.click("Go"), OK, h2, r),
            (ActionCommand.answer("Ada (fast)"), OK, r, r),
        ],
    )
    skeleton = learn_plan(trace, book.resolve)
    assert len(skeleton) == 2
    # the dismissal click and the intercepted attempt both stay out of the plan
    assert "Close it" not in skeleton.steps[0].action_text
    assert skeleton.steps[0].action_text.count("select") == 1


def test_plan_from_trace_with_no_successes_raises():
    book = SnapshotBook()
    h = home_snapshot(overlay=True)
    trace = make_events(
        book,
        [(ActionCommand.click("Go"), OutcomeStatus.INTERCEPTED, h, h)],
    )
    with pytest.raises(EmptyTrace):
        learn_plan(trace, book.resolve)


def test_plan_via_model_parses_numbered_step_list():
    book = SnapshotBook()
    reply = "1. Fill in the lookup form\n2. Open the result and answer"
    gateway = Gateway(ScriptedBackend(default_rules={"plan_learning": lambda request: reply}))
    skeleton = learn_plan(
        clean_success_trace(book), book.resolve, gateway=gateway, task_text=TASK.rendered()
    )
    assert skeleton.descriptions == [
        "Fill in the lookup form",
        "Open the result and answer",
    ]


# -- checks from failures ----------------------------------------------------------


def seed_skeleton():
    book = SnapshotBook()
    return learn_plan(clean_success_trace(book), book.resolve)


def intercepted_failure(book, *, answer_text="gave up"):
    h0 = home_snapshot()
    h1 = home_snapshot(name="Ada", overlay=True, clock=1)
    return make_events(
        book,
        [
            (ActionCommand.type_text("Name", "Ada"), OK, h0, h1),
            (ActionCommand.select("Mode", "fast"), OutcomeStatus.INTERCEPTED, h1, h1),
            (ActionCommand.answer(answer_text), OK, h1, h1),
        ],
    )


def test_interception_becomes_overlay_free_precheck():
    book = SnapshotBook()
    skeleton = seed_skeleton()
    findings = extract_condition_checks(
        [("f1", intercepted_failure(book), TASK)], skeleton, book.resolve_for
    )
    blocked = [f for f in findings if f.pattern is ErrorPattern.INTERCEPTED]
    assert len(blocked) == 1
    finding = blocked[0]
    assert finding.step_index == 0
    assert finding.phase is Phase.PRE
    assert finding.predicate is not None
    # the predicate is the real oracle: false while the overlay is up,
    # true once it is gone
    assert not evaluate_predicate(finding.predicate, home_snapshot(overlay=True))
    assert evaluate_predicate(finding.predicate, home_snapshot())


def test_same_failure_in_two_runs_merges_into_one_finding():
    book = SnapshotBook()
    skeleton = seed_skeleton()
    findings = extract_condition_checks(
        [
            ("f1", intercepted_failure(book), TASK),
            ("f2", intercepted_failure(book, answer_text="stuck"), TASK),
        ],
        skeleton,
        book.resolve_for,
    )
    blocked = [f for f in findings if f.pattern is ErrorPattern.INTERCEPTED]
    assert len(blocked) == 1
    assert blocked[0].evidence == (Evidence("f1", 1), Evidence("f2", 1))


def test_no_failed_traces_means_no_findings():
    book = SnapshotBook()
    assert extract_condition_checks([], seed_skeleton(), book.resolve_for) == []


def test_disabled_control_becomes_wording_only_precheck():
    book = SnapshotBook()
    h0 = home_snapshot()
    h1 = home_snapshot(name="Ada", clock=1)
    trace = make_events(
        book,
        [
            (ActionCommand.type_text("Name", "Ada"), OK, h0, h1),
            (ActionCommand.click("Go"), OutcomeStatus.DISABLED, h1, h1),
            (ActionCommand.answer("gave up"), OK, h1, h1),
        ],
    )
    findings = extract_condition_checks([("f1", trace, TASK)], seed_skeleton(), book.resolve_for)
    inactive = [f for f in findings if f.pattern is ErrorPattern.INACTIVE]
    assert len(inactive) == 1
    assert inactive[0].phase is Phase.PRE
    # a site-specific label must not become a hard predicate: wording only
    assert inactive[0].predicate is None
    assert '"Go"' in inactive[0].nl_condition


def test_timeout_guards_the_step_after_the_click():
    book = SnapshotBook()
    h0 = home_snapshot()
    h1 = home_snapshot(name="Ada", clock=1)
    h2 = home_snapshot(name="Ada", mode="fast", clock=2)
    trace = make_events(
        book,
        [
            (ActionCommand.type_text("Name", "Ada"), OK, h0, h1),
            (ActionCommand.select("Mode", "fast"), OK, h1, h2),
            (ActionCommand.click("Go"), OutcomeStatus.TIMEOUT, h2, h2),
            (ActionCommand.answer("gave up"), OK, h2, h2),
        ],
    )
    findings = extract_condition_checks([("f1", trace, TASK)], seed_skeleton(), book.resolve_for)
    waiting = [f for f in findings if f.pattern is ErrorPattern.NOT_LOADED]
    assert len(waiting) == 1
    assert waiting[0].step_index == 1  # the results step, not the form step
    assert waiting[0].phase is Phase.PRE
    assert evaluate_predicate(waiting[0].predicate, results_snapshot())
    assert not evaluate_predicate(waiting[0].predicate, home_snapshot())


def test_stray_value_check_names_field_and_correct_value():
    book = SnapshotBook()
    h0 = home_snapshot()
    h1 = home_snapshot(name="Bob", clock=1)  # task says Ada
    h2 = home_snapshot(name="Bob", mode="fast", clock=2)
    r = results_snapshot(clock=3)
    trace = make_events(
        book,
        [
            (ActionCommand.type_text("Name", "Bob"), OK, h0, h1),
            (ActionCommand.select("Mode", "fast"), OK, h1, h2),
            (ActionCommand.click("Go"), OK, h2, r),
            (ActionCommand.answer("Bob (fast)"), OK, r, r),
        ],
    )
    findings = extract_condition_checks([("f1", trace, TASK)], seed_skeleton(), book.resolve_for)
    strays = [f for f in findings if f.pattern is ErrorPattern.WRONG_VALUE]
    assert len(strays) == 1
    finding = strays[0]
    assert finding.step_index == 0
    assert finding.phase is Phase.POST
    assert finding.predicate.to_json() == {
        "kind": "text_equals",
        "target": "Name",
        "value": "Ada",
    }
    assert evaluate_predicate(finding.predicate, home_snapshot(name="Ada"))
    assert not evaluate_predicate(finding.predicate, home_snapshot(name="Bob"))


def test_stray_value_on_reworded_site_maps_to_canonical_field():
    # the failed run happened on a skin where Name is called Who; the same
    # role in the same position pins it to the canonical field
    book = SnapshotBook()
    h0 = home_snapshot(skin="b")
    h1 = home_snapshot(name="Bob", clock=1, skin="b")
    trace = make_events(
        book,
        [
            (ActionCommand.type_text("Who", "Bob"), OK, h0, h1),
            (ActionCommand.answer("gave up"), OK, h1, h1),
        ],
    )
    findings = extract_condition_checks([("f1", trace, TASK)], seed_skeleton(), book.resolve_for)
    strays = [f for f in findings if f.pattern is ErrorPattern.WRONG_VALUE]
    assert len(strays) == 1
    assert strays[0].predicate.to_json()["target"] == "Name"
    assert strays[0].predicate.to_json()["value"] == "Ada"
    assert strays[0].grounding == {"role": "textbox", "ordinal": 0}


def test_failure_wording_classifies_events_whose_status_lies():
    book = SnapshotBook()
    h0 = home_snapshot()
    h1 = home_snapshot(name="Ada", clock=1)
    trace = TraceRecord(
        events=[
            ActionEvent(
                step_index=0,
                command=ActionCommand.click("Go"),
                status=OK,
                message='the page didn\'t change after clicking "Go"',
                snapshot_before_ref=book.add(h0),
                snapshot_after_ref=book.add(h1),
            )
        ]
    )
    findings = extract_condition_checks([("f1", trace, TASK)], seed_skeleton(), book.resolve_for)
    assert [f.pattern for f in findings] == [ErrorPattern.PARTIAL_ACTION]
    assert findings[0].phase is Phase.POST


# -- fallbacks from recoveries -------------------------------------------------------


def overlay_finding(step=0):
    return ChallengeFinding(
        step_index=step,
        pattern=ErrorPattern.INTERCEPTED,
        evidence=(Evidence("f1", 1),),
        phase=Phase.PRE,
        nl_condition="no overlay is blocking the page",
        predicate=Predicate.no_overlay(),
    )


def notloaded_finding(step=1):
    return ChallengeFinding(
        step_index=step,
        pattern=ErrorPattern.NOT_LOADED,
        evidence=(Evidence("f2", 2),),
        phase=Phase.PRE,
        nl_condition="the /results page is loaded",
        predicate=Predicate.url_contains("/results"),
    )


def recovery_success_trace(book, *, dismiss_label="Close it"):
    """Success that dismissed an overlay, re-selected, then re-clicked after
    a timeout: only the dismissal and the timeout retry are recoveries."""
    h0 = home_snapshot()
    h1o = home_snapshot(name="Ada", overlay=True, clock=1)
    h1 = home_snapshot(name="Ada", clock=2)
    h2 = home_snapshot(name="Ada", mode="fast", clock=3)
    r = results_snapshot(clock=4)
    return make_events(
        book,
        [
            (ActionCommand.type_text("Name", "Ada"), OK, h0, h1o),
            (ActionCommand.select("Mode", "fast"), OutcomeStatus.INTERCEPTED, h1o, h1o),
            (ActionCommand.click(dismiss_label), OK, h1o, h1),
            (ActionCommand.select("Mode", "fast"), OK, h1, h2),
            (ActionCommand.click("Go"), OutcomeStatus.TIMEOUT, h2, h2),
            (ActionCommand.click("Go"), OK, h2, r),
            (ActionCommand.answer("Ada (fast)"), OK, r, r),
        ],
    )


def test_overlay_dismissal_ranks_by_how_many_runs_used_it():
    book = SnapshotBook()
    successes = [
        ("s1", recovery_success_trace(book)),
        ("s2", recovery_success_trace(book)),
        ("s3", clean_success_trace(book)),
    ]
    findings = [overlay_finding(0)]
    recoveries = extract_fallbacks(successes, findings, seed_skeleton(), book.resolve_for)
    dismissals = [r for r in recoveries if r.step_index == 0]
    assert dismissals, "two runs dismissed the overlay; that evidence must surface"
    assert dismissals[0].description == 'click "Close it"'
    assert dismissals[0].support == 2
    assert dismissals[0].source_run_id == "s1"


def test_retry_after_interception_is_not_treated_as_recovery():
    book = SnapshotBook()
    recoveries = extract_fallbacks(
        [("s1", recovery_success_trace(book))],
        [overlay_finding(0)],
        seed_skeleton(),
        book.resolve_for,
    )
    # re-selecting Mode after the dismissal is the plan resuming, not a recovery
    assert all("select" not in r.description for r in recoveries)


def test_retry_after_timeout_lands_on_the_waiting_step():
    book = SnapshotBook()
    recoveries = extract_fallbacks(
        [("s1", recovery_success_trace(book))],
        [overlay_finding(0), notloaded_finding(1)],
        seed_skeleton(),
        book.resolve_for,
    )
    retries = [r for r in recoveries if r.description == 'click "Go"']
    assert len(retries) == 1
    assert retries[0].step_index == 1
    assert retries[0].support == 1


def test_dismissals_cover_every_intercepted_step():
    book = SnapshotBook()
    recoveries = extract_fallbacks(
        [("s1", recovery_success_trace(book))],
        [overlay_finding(0), overlay_finding(1)],
        seed_skeleton(),
        book.resolve_for,
    )
    # the overlay was dismissed on the form page, but the same dismiss
    # control handles the popup wherever it appears
    assert {r.step_index for r in recoveries if "Close it" in r.description} == {0, 1}


def test_challenged_step_with_no_recovery_keeps_its_finding():
    book = SnapshotBook()
    skeleton = seed_skeleton()
    findings = [notloaded_finding(1)]
    recoveries = extract_fallbacks(
        [("s1", clean_success_trace(book))], findings, skeleton, book.resolve_for
    )
    assert recoveries == []
    doc = assemble_workflow(skeleton, findings, recoveries, TASK.bindings, family_id="tiny-quest")
    assert doc.units[1].pre_checks and not doc.units[1].fallbacks


# -- assembly ---------------------------------------------------------------------


def test_assembled_document_validates_and_is_genericized():
    book = SnapshotBook()
    skeleton = seed_skeleton()
    findings = [overlay_finding(0)]
    recoveries = extract_fallbacks(
        [("s1", recovery_success_trace(book))], findings, skeleton, book.resolve_for
    )
    doc = assemble_workflow(skeleton, findings, recoveries, TASK.bindings, family_id="tiny-quest")
    assert validate_workflow(doc) == []
    assert "<name>" in doc.units[0].action_text
    assert "<mode>" in doc.units[0].action_text
    assert doc.version == 1
    assert doc.units[0].extra["page"] == "/home"
    assert doc.units[0].extra["groundings"][0] == {"role": "textbox", "ordinal": 0}


def test_workflow_id_depends_on_content_only():
    skeleton = seed_skeleton()
    a = assemble_workflow(skeleton, [], [], TASK.bindings, family_id="tiny-quest")
    b = assemble_workflow(skeleton, [], [], TASK.bindings, family_id="tiny-quest")
    assert a.workflow_id == b.workflow_id
    assert a == b
    reworded = replace(
        skeleton,
        steps=(replace(skeleton.steps[0], action_text='click "Go"'), skeleton.steps[1]),
    )
    c = assemble_workflow(reworded, [], [], TASK.bindings, family_id="tiny-quest")
    assert c.workflow_id != a.workflow_id


def test_checks_cap_at_three_keeping_the_best_evidenced():
    skeleton = seed_skeleton()
    findings = []
    for n in range(4):
        findings.append(
            ChallengeFinding(
                step_index=0,
                pattern=ErrorPattern.NOT_LOCATED,
                evidence=tuple(Evidence(f"f{n}-{k}", 0) for k in range(n + 1)),
                phase=Phase.PRE,
                nl_condition=f'"control {n}" is present on the page',
            )
        )
    doc = assemble_workflow(skeleton, findings, [], TASK.bindings, family_id="tiny-quest")
    texts = [c.nl_text for c in doc.units[0].pre_checks]
    assert len(texts) == 3
    assert '"control 0" is present on the page' not in texts  # the single-witness one dropped


def test_fallbacks_cap_at_three_with_dense_ranks():
    skeleton = seed_skeleton()
    recoveries = [
        RecoveryFinding(0, f"s{n}", f'click "option {n}"', (ActionCommand.click(f"option {n}"),), 4 - n)
        for n in range(4)
    ]
    doc = assemble_workflow(skeleton, [overlay_finding(0)], recoveries, TASK.bindings, family_id="tiny-quest")
    assert [f.rank for f in doc.units[0].fallbacks] == [1, 2, 3]
    assert [f.extra["support"] for f in doc.units[0].fallbacks] == [4, 3, 2]


def test_findings_outside_the_skeleton_are_rejected():
    skeleton = seed_skeleton()
    stray = replace(overlay_finding(0), step_index=9)
    with pytest.raises(IndexOutOfRange):
        assemble_workflow(skeleton, [stray], [], TASK.bindings, family_id="tiny-quest")
    with pytest.raises(IndexOutOfRange):
        assemble_workflow(
            skeleton,
            [],
            [RecoveryFinding(9, "s1", 'click "x"', (ActionCommand.click("x"),), 1)],
            TASK.bindings,
            family_id="tiny-quest",
        )


# -- end to end over the real simulator --------------------------------------------


@pytest.fixture(scope="module")
def explored(tmp_path_factory):
    store = Store(tmp_path_factory.mktemp("synth-store"))
    ledgers = {}
    for family in ("flight-search", "article-lookup"):
        task = default_task(family)
        ledgers[family] = explore_family(
            task, ExplorationConfig(base_seed=1337), store, judge=oracle_judge
        )
    return store, ledgers


def test_full_pipeline_produces_a_valid_stored_workflow(explored):
    store, ledgers = explored
    doc = synth_family(ledgers["flight-search"], store)
    assert validate_workflow(doc) == []
    assert doc.family_id == "flight-search"
    assert doc.version == 1
    # persisted where the loader expects it, with a synthesis report alongside
    assert store.load_workflow(doc.workflow_id) == doc
    report = json.loads(
        (store.workflow_dir(doc.workflow_id) / "synthesis_report.json").read_text()
    )
    assert report["workflow_id"] == doc.workflow_id
    assert report["skeleton"] == [u.action_text for u in doc.units] or report["findings"]


def test_every_guard_cites_a_stored_trace(explored):
    store, ledgers = explored
    ledger = ledgers["flight-search"]
    doc = synth_family(ledger, store)
    failed_ids = {ref.split("/")[3] for ref in ledger.failed_traces}
    success_ids = {ref.split("/")[3] for ref in ledger.successful_traces}
    checked = 0
    for unit in doc.units:
        for check in unit.pre_checks + unit.post_checks:
            for ev in check.extra["evidence"]:
                assert ev["run_id"] in failed_ids
                trace = store.load_trace("flight-search", ev["run_id"])
                assert 0 <= ev["event_index"] < len(trace.events)
                assert ev["run_id"] in doc.provenance.run_ids
                checked += 1
        for fb in unit.fallbacks:
            src = fb.extra["source_run_id"]
            assert src in success_ids
            assert src in doc.provenance.run_ids
            checked += 1
    assert checked > 0, "a guarded workflow with no guards proves nothing"


def test_workflow_guards_appear_only_on_challenged_steps(explored):
    store, ledgers = explored
    doc = synth_family(ledgers["article-lookup"], store)
    report = json.loads(
        (store.workflow_dir(doc.workflow_id) / "synthesis_report.json").read_text()
    )
    challenged = {f["step_index"] for f in report["findings"]}
    for unit in doc.units:
        if unit.index not in challenged:
            assert not unit.pre_checks and not unit.post_checks


def test_family_without_a_single_success_refuses_to_synthesize(tmp_path):
    store = Store(tmp_path)
    ledger = RunLedger(
        family_id="flight-search", rows=(), successful_traces=(), failed_traces=()
    )
    with pytest.raises(NoSuccessfulRun):
        synth_family(ledger, store)


def test_success_from_a_task_variation_is_enough(tmp_path):
    # the only successful run answered a variant task; its bindings drive
    # the slot markers
    store = Store(tmp_path)
    book = SnapshotBook()
    variant = replace(TASK, bindings={"name": "Grace", "mode": "slow"})
    h0 = home_snapshot()
    h1 = home_snapshot(name="Grace", clock=1)
    h2 = home_snapshot(name="Grace", mode="slow", clock=2)
    r = results_snapshot(clock=3)
    trace = make_events(
        book,
        [
            (ActionCommand.type_text("Name", "Grace"), OK, h0, h1),
            (ActionCommand.select("Mode", "slow"), OK, h1, h2),
            (ActionCommand.click("Go"), OK, h2, r),
            (ActionCommand.answer("Grace (slow)"), OK, r, r),
        ],
    )
    for snapshot in book.by_ref.values():
        store.save_snapshot("tiny-quest", "v1", snapshot)
    ref = store.save_trace("tiny-quest", "v1", trace)
    store.save_run_record(
        "tiny-quest",
        RunRecord(run_id="v1", task=variant, policy_name="task_only", trace_ref=ref),
    )
    ledger = RunLedger(
        family_id="tiny-quest", rows=(), successful_traces=(ref,), failed_traces=()
    )
    doc = synth_family(ledger, store)
    assert "<name>" in doc.units[0].action_text
    assert "<mode>" in doc.units[0].action_text


def test_grounded_workflow_runs_on_a_differently_worded_site(explored):
    store, ledgers = explored
    doc = synth_family(ledgers["flight-search"], store)
    site_b = FAMILY_SITES["flight-search"][1]
    task = default_task("flight-search")
    variant = replace(task, site=site_b, bindings={**task.bindings, "website": site_b})
    literals = set()
    for unit in doc.units:
        for command in parse_action_text(unit.action_text):
            if command.target:
                literals.add(command.target)
    for seed in range(80):
        policy = PlanGuidedPolicy.from_workflow(doc, variant.bindings)
        env = SimWeb(SITES[site_b], variant.bindings)
        record, trace = execute_task(
            variant, env, policy, seed=seed, max_steps=30, store=store, run_id=f"skinb-{seed}"
        )
        label, _, _ = oracle_judge(record, trace)
        if label.value == "success":
            retargeted = {
                e.command.target
                for e in trace.events
                if e.command.target and e.command.target not in literals
            }
            assert retargeted, "success must come from re-grounded targets, not luck"
            return
    raise AssertionError("no fault-free seed found; grounding appears broken")
