"""Snapshot values, deterministic rendering, and predicate evaluation."""

from __future__ import annotations

from guardweave.env import (
    Element,
    Overlay,
    PageSnapshot,
    Role,
    evaluate_predicate,
    make_snapshot,
    render_layout_text,
    render_screenshot_png,
)
from guardweave.model import Predicate


def sample_snapshot(*, overlays: tuple[Overlay, ...] = ()) -> PageSnapshot:
    return make_snapshot(
        url="sim://demo/results",
        title="Demo",
        elements=(
            Element("h", Role.TEXT, "Results", text_value="Matching items"),
            Element("row1", Role.TEXT, "listing", text_value="Listing 1"),
            Element("row2", Role.TEXT, "listing", text_value="Listing 2"),
            Element("hidden", Role.TEXT, "listing", text_value="Listing 3", visible=False),
            Element("city", Role.TEXTBOX, "City", text_value="Lisbon"),
            Element("go", Role.BUTTON, "Search", enabled=False),
            Element("link", Role.LINK, "Author: Alex Rivera"),
        ),
        overlays=overlays,
        clock=7,
    )


def test_snapshot_json_round_trip() -> None:
    snap = sample_snapshot(overlays=(Overlay("promo", "Close promo"),))
    again = PageSnapshot.from_json(snap.to_json())
    assert again == snap
    assert again.canonical_bytes() == snap.canonical_bytes()


def test_page_path_strips_scheme_and_site() -> None:
    assert sample_snapshot().page_path() == "/results"
    bare = PageSnapshot(url="sim://demo", title="", elements=(), overlays=(), clock=0, screenshot_ref="x")
    assert bare.page_path() == "/"


def test_layout_text_is_deterministic_and_reflects_state() -> None:
    snap = sample_snapshot(overlays=(Overlay("promo", "Close promo"),))
    layout = render_layout_text(snap.url, snap.title, snap.elements, snap.overlays)
    assert layout == render_layout_text(snap.url, snap.title, snap.elements, snap.overlays)
    assert "[Demo]" in layout
    assert "sim://demo/results" in layout
    assert "### OVERLAY promo: [Close promo] ###" in layout
    assert "[City: Lisbon]" in layout
    assert "( Search ) [disabled]" in layout
    assert "<Author: Alex Rivera>" in layout
    assert "Listing 3" not in layout  # invisible elements are not rendered


def test_screenshot_ref_is_content_hash_of_layout() -> None:
    a = sample_snapshot()
    b = sample_snapshot()
    assert a.screenshot_ref == b.screenshot_ref
    c = sample_snapshot(overlays=(Overlay("promo", "Close promo"),))
    assert c.screenshot_ref != a.screenshot_ref


def test_screenshot_png_is_deterministic() -> None:
    snap = sample_snapshot()
    png1 = render_screenshot_png(snap)
    png2 = render_screenshot_png(snap)
    assert png1 == png2
    assert png1[:8] == b"\x89PNG\r\n\x1a\n"


def test_exists_and_not_exists_respect_visibility() -> None:
    snap = sample_snapshot()
    assert evaluate_predicate(Predicate.exists("Results"), snap)
    assert not evaluate_predicate(Predicate.exists("missing"), snap)
    assert evaluate_predicate(Predicate.not_exists("missing"), snap)
    only_hidden = make_snapshot(
        url="sim://demo/home",
        title="t",
        elements=(Element("x", Role.TEXT, "ghost", visible=False),),
        overlays=(),
        clock=0,
    )
    assert not evaluate_predicate(Predicate.exists("ghost"), only_hidden)
    assert evaluate_predicate(Predicate.not_exists("ghost"), only_hidden)


def test_text_equals_matches_first_visible_element_with_label() -> None:
    snap = sample_snapshot()
    assert evaluate_predicate(Predicate.text_equals("listing", "Listing 1"), snap)
    assert not evaluate_predicate(Predicate.text_equals("listing", "Listing 3"), snap)
    assert not evaluate_predicate(Predicate.text_equals("absent", "x"), snap)


def test_field_value_only_matches_form_roles() -> None:
    snap = sample_snapshot()
    assert evaluate_predicate(Predicate.field_value("City", "Lisbon"), snap)
    assert not evaluate_predicate(Predicate.field_value("City", "Porto"), snap)
    # "Results" is a text element, not a form field.
    assert not evaluate_predicate(Predicate.field_value("Results", "Matching items"), snap)


def test_url_contains_and_no_overlay_and_count() -> None:
    snap = sample_snapshot()
    assert evaluate_predicate(Predicate.url_contains("/results"), snap)
    assert not evaluate_predicate(Predicate.url_contains("/home"), snap)
    assert evaluate_predicate(Predicate.no_overlay(), snap)
    covered = sample_snapshot(overlays=(Overlay("promo", "Close promo"),))
    assert not evaluate_predicate(Predicate.no_overlay(), covered)
    assert evaluate_predicate(Predicate.count_at_least("listing", 2), snap)
    assert not evaluate_predicate(Predicate.count_at_least("listing", 3), snap)  # hidden one excluded
