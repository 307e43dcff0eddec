"""Bundled simulated site families and their default tasks.

Three families, two visual skins each.  Skins share page names, option
vocabularies, and result-mirror labels (same backend, different chrome), but
differ in form labels and button text, which is exactly what makes workflow
reuse across websites hard.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from . import slots
from .actions import ActionCommand, CommandKind
from .env import Role
from .model import Predicate, TaskSpec, VariationKind
from .simweb import (
    ElementDef,
    FaultKind,
    FaultSpec,
    FormField,
    MirrorFields,
    PageDef,
    SetTextFrom,
    SimGoal,
    SimSiteDef,
    SimWeb,
    SlotAxis,
    TransitionRule,
)
from .actions import CommandKind


def _flight_site(site_id: str, *, banner: str, labels: dict[str, str], submit: str) -> SimSiteDef:
    home = PageDef(
        name="home",
        title=banner,
        elements=(
            ElementDef("banner", Role.TEXT, banner, text="Compare fares across carriers"),
            ElementDef("from", Role.TEXTBOX, labels["from"], required_field=True),
            ElementDef("to", Role.TEXTBOX, labels["to"], required_field=True),
            ElementDef("date", Role.TEXTBOX, labels["date"], required_field=True),
            ElementDef("cabin", Role.SELECT, labels["cabin"], options=("economy", "business"), required_field=True),
            ElementDef("trip", Role.SELECT, labels["trip"], options=("one-way", "round-trip"), required_field=True),
            ElementDef("pax", Role.TEXTBOX, labels["pax"], required_field=True),
            ElementDef("submit", Role.BUTTON, submit, submit_gate=True),
        ),
    )
    results = PageDef(
        name="results",
        title=f"{banner} results",
        elements=(
            ElementDef("header", Role.TEXT, "Results", text="Matching flights"),
            ElementDef("m_from", Role.TEXT, "quoted-from"),
            ElementDef("m_to", Role.TEXT, "quoted-to"),
            ElementDef("m_date", Role.TEXT, "quoted-date"),
            ElementDef("m_cabin", Role.TEXT, "quoted-cabin"),
            ElementDef("m_trip", Role.TEXT, "quoted-trip"),
            ElementDef("m_pax", Role.TEXT, "quoted-passengers"),
            ElementDef("summary", Role.TEXT, "result-summary"),
            ElementDef("back", Role.BUTTON, "New search"),
        ),
    )
    summary_tpl = (
        f"<{labels['from']}> to <{labels['to']}> on <{labels['date']}> "
        f"(<{labels['cabin']}>, <{labels['trip']}>, <{labels['pax']}>)"
    )
    return SimSiteDef(
        site_id=site_id,
        entry_page="home",
        pages=(home, results),
        transitions=(
            TransitionRule(
                page="home",
                kind=CommandKind.CLICK,
                target_label=submit,
                goto="results",
                effects=(
                    MirrorFields(
                        (
                            (labels["from"], "m_from"),
                            (labels["to"], "m_to"),
                            (labels["date"], "m_date"),
                            (labels["cabin"], "m_cabin"),
                            (labels["trip"], "m_trip"),
                            (labels["pax"], "m_pax"),
                        )
                    ),
                    SetTextFrom("summary", summary_tpl),
                ),
            ),
            TransitionRule(page="results", kind=CommandKind.CLICK, target_label="New search", goto="home"),
        ),
        goal=SimGoal(
            predicates=(
                Predicate.url_contains("/results"),
                Predicate.text_equals("quoted-from", "<departure city>"),
                Predicate.text_equals("quoted-to", "<destination city>"),
                Predicate.text_equals("quoted-date", "<travel date>"),
                Predicate.text_equals("quoted-cabin", "<cabin type>"),
                Predicate.text_equals("quoted-trip", "<trip kind>"),
                Predicate.text_equals("quoted-passengers", "<passenger count>"),
            ),
            answer_required=True,
            answer_substring="<destination city>",
        ),
        faults=(
            FaultSpec(FaultKind.POPUP, seed=11, at_clock=2, probability=0.5, overlay_id="newsletter", overlay_label="Dismiss"),
            FaultSpec(FaultKind.SLOW_LOAD, seed=12, probability=0.10),
            FaultSpec(FaultKind.INTERCEPTED_CLICK, seed=13, probability=0.04, overlay_id="cookie-banner", overlay_label="Accept cookies"),
        ),
        slot_axes={
            "cabin type": SlotAxis(VariationKind.ATTRIBUTE.value, ("economy", "business")),
            "departure city": SlotAxis(VariationKind.ATTRIBUTE.value, ("Paris", "Berlin", "Lisbon")),
            "destination city": SlotAxis(VariationKind.ATTRIBUTE.value, ("Tokyo", "Oslo", "Madrid")),
            "travel date": SlotAxis(VariationKind.ATTRIBUTE.value, ("2025-05-01", "2025-06-15")),
            "passenger count": SlotAxis(VariationKind.ATTRIBUTE.value, ("2 adults", "1 adult")),
            "trip kind": SlotAxis(VariationKind.CATEGORY.value, ("one-way", "round-trip")),
            "website": SlotAxis(VariationKind.WEBSITE.value, ("flightseek-a", "flightseek-b")),
        },
        form_fields=(
            FormField("departure city", labels["from"], "type"),
            FormField("destination city", labels["to"], "type"),
            FormField("travel date", labels["date"], "type"),
            FormField("cabin type", labels["cabin"], "select"),
            FormField("trip kind", labels["trip"], "select"),
            FormField("passenger count", labels["pax"], "type"),
        ),
        submit_label=submit,
        read_label="result-summary",
    )


def _listing_site(site_id: str, *, banner: str, labels: dict[str, str], submit: str) -> SimSiteDef:
    listings = tuple(
        ElementDef(f"l{i}", Role.TEXT, "listing", text=f"Listing {i}: {blurb}")
        for i, blurb in enumerate(
            (
                "bright corner unit near the park",
                "quiet upper floor with balcony",
                "renovated, close to transit",
                "garden access, pets welcome",
                "compact and well lit",
                "top floor with a view",
            ),
            start=1,
        )
    )
    home = PageDef(
        name="home",
        title=banner,
        elements=(
            ElementDef("banner", Role.TEXT, banner, text="Find your next place"),
            ElementDef("city", Role.TEXTBOX, labels["city"], required_field=True),
            ElementDef("ptype", Role.SELECT, labels["ptype"], options=("apartment", "studio", "cottage"), required_field=True),
            ElementDef("mode", Role.SELECT, labels["mode"], options=("rental", "purchase"), required_field=True),
            ElementDef("price", Role.TEXTBOX, labels["price"], required_field=True),
            ElementDef("submit", Role.BUTTON, submit, submit_gate=True),
        ),
    )
    results = PageDef(
        name="results",
        title=f"{banner} listings",
        elements=(
            ElementDef("header", Role.TEXT, "Listings", text="Matching homes"),
            ElementDef("m_city", Role.TEXT, "shown-city"),
            ElementDef("m_type", Role.TEXT, "shown-type"),
            ElementDef("m_mode", Role.TEXT, "shown-mode"),
            ElementDef("m_price", Role.TEXT, "shown-price"),
            ElementDef("summary", Role.TEXT, "result-summary"),
            *listings,
            ElementDef("count", Role.TEXT, "listing-count", text="6 matches"),
        ),
    )
    summary_tpl = f"<{labels['city']}> (<{labels['ptype']}>, <{labels['mode']}>, max <{labels['price']}>)"
    return SimSiteDef(
        site_id=site_id,
        entry_page="home",
        pages=(home, results),
        transitions=(
            TransitionRule(
                page="home",
                kind=CommandKind.CLICK,
                target_label=submit,
                goto="results",
                effects=(
                    MirrorFields(
                        (
                            (labels["city"], "m_city"),
                            (labels["ptype"], "m_type"),
                            (labels["mode"], "m_mode"),
                            (labels["price"], "m_price"),
                        )
                    ),
                    SetTextFrom("summary", summary_tpl),
                ),
            ),
        ),
        goal=SimGoal(
            predicates=(
                Predicate.url_contains("/results"),
                Predicate.text_equals("shown-city", "<city>"),
                Predicate.text_equals("shown-type", "<home type>"),
                Predicate.text_equals("shown-mode", "<deal mode>"),
                Predicate.text_equals("shown-price", "<price ceiling>"),
                Predicate.count_at_least("listing", 3),
            ),
            answer_required=True,
            answer_substring="<city>",
        ),
        faults=(
            FaultSpec(FaultKind.POPUP, seed=21, at_clock=1, probability=0.45, overlay_id="promo", overlay_label="Close promo"),
            FaultSpec(FaultKind.SLOW_LOAD, seed=22, probability=0.10),
            FaultSpec(FaultKind.INTERCEPTED_CLICK, seed=23, probability=0.04, overlay_id="cookie-banner", overlay_label="Accept cookies"),
        ),
        slot_axes={
            "listing count": SlotAxis(VariationKind.ATTRIBUTE.value, ("three", "four")),
            "city": SlotAxis(VariationKind.ATTRIBUTE.value, ("Lisbon", "Porto", "Valencia")),
            "home type": SlotAxis(VariationKind.ATTRIBUTE.value, ("apartment", "studio", "cottage")),
            "price ceiling": SlotAxis(VariationKind.ATTRIBUTE.value, ("1500 usd", "2200 usd")),
            "deal mode": SlotAxis(VariationKind.CATEGORY.value, ("rental", "purchase")),
            "website": SlotAxis(VariationKind.WEBSITE.value, ("homescan-a", "homescan-b")),
        },
        form_fields=(
            FormField("city", labels["city"], "type"),
            FormField("home type", labels["ptype"], "select"),
            FormField("deal mode", labels["mode"], "select"),
            FormField("price ceiling", labels["price"], "type"),
        ),
        submit_label=submit,
        read_label="result-summary",
    )


def _article_site(site_id: str, *, banner: str, labels: dict[str, str], submit: str) -> SimSiteDef:
    articles = tuple(
        ElementDef(f"a{i}", Role.TEXT, "article", text=f"Field notes, part {i}")
        for i in range(1, 5)
    )
    home = PageDef(
        name="home",
        title=banner,
        elements=(
            ElementDef("banner", Role.TEXT, banner, text="Archive of long-form writing"),
            ElementDef("q", Role.TEXTBOX, labels["q"], required_field=True),
            ElementDef("section", Role.SELECT, labels["section"], options=("culture", "technology", "science"), required_field=True),
            ElementDef("submit", Role.BUTTON, submit, submit_gate=True),
        ),
    )
    results = PageDef(
        name="results",
        title=f"{banner} search",
        elements=(
            ElementDef("header", Role.TEXT, "Search results", text="Most relevant first"),
            ElementDef("m_topic", Role.TEXT, "shown-topic"),
            ElementDef("m_section", Role.TEXT, "shown-section"),
            ElementDef("top", Role.TEXT, "top-result"),
            ElementDef("author_link", Role.LINK, "Author: Alex Rivera"),
        ),
    )
    author = PageDef(
        name="author",
        title=f"{banner} author",
        elements=(
            ElementDef("name", Role.TEXT, "author-name", text="Alex Rivera"),
            ElementDef("m_topic2", Role.TEXT, "shown-topic"),
            ElementDef("m_section2", Role.TEXT, "shown-section"),
            *articles,
        ),
    )
    return SimSiteDef(
        site_id=site_id,
        entry_page="home",
        pages=(home, results, author),
        transitions=(
            TransitionRule(
                page="home",
                kind=CommandKind.CLICK,
                target_label=submit,
                goto="results",
                effects=(
                    MirrorFields(((labels["q"], "m_topic"), (labels["section"], "m_section"))),
                    SetTextFrom("top", f"<{labels['q']}> coverage by Alex Rivera"),
                ),
            ),
            TransitionRule(
                page="results",
                kind=CommandKind.CLICK,
                target_label="Author: Alex Rivera",
                goto="author",
                effects=(
                    MirrorFields(((labels["q"], "m_topic2"), (labels["section"], "m_section2"))),
                ),
            ),
        ),
        goal=SimGoal(
            predicates=(
                Predicate.url_contains("/author"),
                Predicate.text_equals("author-name", "Alex Rivera"),
                Predicate.text_equals("shown-topic", "<topic>"),
                Predicate.text_equals("shown-section", "<section>"),
                Predicate.count_at_least("article", 3),
            ),
            answer_required=True,
            answer_substring="Alex Rivera",
        ),
        faults=(
            FaultSpec(FaultKind.POPUP, seed=31, at_clock=1, probability=0.45, overlay_id="survey", overlay_label="No thanks"),
            FaultSpec(FaultKind.SLOW_LOAD, seed=32, probability=0.08),
            FaultSpec(FaultKind.INTERCEPTED_CLICK, seed=33, probability=0.04, overlay_id="signup-banner", overlay_label="Maybe later"),
        ),
        slot_axes={
            "topic": SlotAxis(VariationKind.ATTRIBUTE.value, ("quantum sensors", "tidal power", "urban gardening")),
            "section": SlotAxis(VariationKind.CATEGORY.value, ("technology", "science", "culture")),
            "website": SlotAxis(VariationKind.WEBSITE.value, ("articlehub-a", "articlehub-b")),
        },
        form_fields=(
            FormField("topic", labels["q"], "type"),
            FormField("section", labels["section"], "select"),
        ),
        submit_label=submit,
        read_label="author-name",
    )


SITES: dict[str, SimSiteDef] = {
    "flightseek-a": _flight_site(
        "flightseek-a",
        banner="FlightSeek",
        labels={"from": "From", "to": "To", "date": "Date", "cabin": "Cabin", "trip": "Trip type", "pax": "Passengers"},
        submit="Search",
    ),
    "flightseek-b": _flight_site(
        "flightseek-b",
        banner="SkyScout",
        labels={"from": "Origin", "to": "Destination", "date": "Travel day", "cabin": "Class", "trip": "Journey", "pax": "Travellers"},
        submit="Find flights",
    ),
    "homescan-a": _listing_site(
        "homescan-a",
        banner="HomeScan",
        labels={"city": "City", "ptype": "Property type", "mode": "Listing mode", "price": "Max price"},
        submit="Search listings",
    ),
    "homescan-b": _listing_site(
        "homescan-b",
        banner="NestIndex",
        labels={"city": "Location", "ptype": "Home kind", "mode": "Deal type", "price": "Budget cap"},
        submit="Browse homes",
    ),
    "articlehub-a": _article_site(
        "articlehub-a",
        banner="ArticleHub",
        labels={"q": "Search topic", "section": "Section"},
        submit="Go",
    ),
    "articlehub-b": _article_site(
        "articlehub-b",
        banner="LongformDesk",
        labels={"q": "Query", "section": "Category"},
        submit="Run search",
    ),
}


FAMILY_SITES: dict[str, tuple[str, ...]] = {
    "flight-search": ("flightseek-a", "flightseek-b"),
    "listing-scrape": ("homescan-a", "homescan-b"),
    "article-lookup": ("articlehub-a", "articlehub-b"),
}


_ANSWER_TEMPLATES: dict[str, str] = {
    "flight-search": (
        'Flights found: <departure city> to <destination city> on <travel date> '
        '(<cabin type>, <trip kind>, <passenger count>)'
    ),
    "listing-scrape": (
        '<listing count> options reviewed in <city>: <home type>, <deal mode>, up to <price ceiling>'
    ),
    "article-lookup": 'Recent work by Alex Rivera: <topic> coverage in the <section> section',
}


def default_task(family_id: str) -> TaskSpec:
    if family_id == "flight-search":
        return TaskSpec(
            family_id=family_id,
            template=(
                "Search <website> for a <trip kind> <cabin type> flight from <departure city> "
                "to <destination city> on <travel date> for <passenger count>, and report the result summary."
            ),
            bindings={
                "website": "flightseek-a",
                "trip kind": "one-way",
                "cabin type": "economy",
                "departure city": "Paris",
                "destination city": "Tokyo",
                "travel date": "2025-05-01",
                "passenger count": "2 adults",
            },
            site="flightseek-a",
        )
    if family_id == "listing-scrape":
        return TaskSpec(
            family_id=family_id,
            template=(
                "On <website>, list the top <listing count> <home type> listings in <city> "
                "under <price ceiling> (<deal mode>), and summarize them."
            ),
            bindings={
                "website": "homescan-a",
                "listing count": "three",
                "home type": "apartment",
                "city": "Lisbon",
                "price ceiling": "1500 usd",
                "deal mode": "rental",
            },
            site="homescan-a",
        )
    if family_id == "article-lookup":
        return TaskSpec(
            family_id=family_id,
            template=(
                "Find <section> articles about <topic> on <website> and summarize the recent "
                "work of the top author."
            ),
            bindings={
                "website": "articlehub-a",
                "section": "technology",
                "topic": "quantum sensors",
            },
            site="articlehub-a",
        )
    raise KeyError(f"unknown family {family_id!r}")


def site_for_task(task: TaskSpec) -> SimSiteDef:
    return SITES[task.site]


def make_env(task: TaskSpec) -> SimWeb:
    return SimWeb(site_for_task(task), task.bindings)


def happy_path(site: SimSiteDef, bindings: dict[str, str]) -> list[ActionCommand]:
    """The canonical command sequence that completes the task on this site."""
    commands: list[ActionCommand] = []
    for form_field in site.form_fields:
        value = bindings[form_field.slot]
        if form_field.kind == "select":
            commands.append(ActionCommand.select(form_field.label, value))
        else:
            commands.append(ActionCommand.type_text(form_field.label, value))
    commands.append(ActionCommand.click(site.submit_label))
    if site.site_id.startswith("articlehub"):
        commands.append(ActionCommand.click("Author: Alex Rivera"))
    commands.append(ActionCommand.read(site.read_label))
    family = next(fam for fam, ids in FAMILY_SITES.items() if site.site_id in ids)
    answer_text = slots.bind_text(_ANSWER_TEMPLATES[family], bindings)
    commands.append(ActionCommand.answer(answer_text))
    return commands


def load_task(path) -> TaskSpec:
    """Read a task file (JSON with family_id/template/bindings/site)."""
    data = json.loads(Path(path).read_text("utf-8"))
    task = TaskSpec.from_json(data)
    problems = task.validate()
    if problems:
        raise ValueError(f"task file {path}: " + "; ".join(problems))
    return task


def task_to_json(task: TaskSpec) -> dict:
    return task.to_json()


def bundled_task_path(family_id: str):
    return resources.files("guardweave").joinpath("data", "tasks", f"{family_id}.json")


def bundled_families() -> tuple[str, ...]:
    return tuple(sorted(FAMILY_SITES))
