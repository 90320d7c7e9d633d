from __future__ import annotations

import re
from html.parser import HTMLParser

import pytest

from dagdoc.behavior import run_behavior_suite
from dagdoc.card import (
    DEFAULT_K,
    SECTION_IDS,
    SectionProvider,
    build_card_model,
    check_fragment,
    default_providers,
    external_section,
    flow_level_view,
    generate_card,
    render_behavior,
    render_card,
    render_description,
    render_loss_chart,
    render_ownership,
    render_structure_params,
    render_training_info,
    resolve_flow,
    split_sections,
)
from dagdoc.errors import MalformedFragment, ProviderError, UnknownFlow
from dagdoc.executor import execute_run
from dagdoc.metrics import MetricPoint, MetricSeries

from conftest import flow_from

TOY = """\
flow Toy
doc "Fits a line & checks it <carefully>."
param lr float default 0.05
param epochs int default 20
step prep
  exec "true"
step fit after prep
  resources gpu
  builtin train_toy data="1,3;2,5;3,7" epochs={param.epochs} lr={param.lr}
step report after prep
  exec "true"
step done after fit, report
  exec "true"

behavior "near 9 at 4"
  input "4"
  via "{sys.python} -m dagdoc.toy predict {artifact.fit.model}"
  expect approx 9 tol 100

behavior "always a number"
  input "1"
  via "{sys.python} -m dagdoc.toy predict {artifact.fit.model}"
  expect regex "^[0-9.e+-]+$"

behavior "impossible"
  input "1"
  via "{sys.python} -m dagdoc.toy predict {artifact.fit.model}"
  expect equals "banana"
"""


@pytest.fixture
def toy():
    return flow_from(TOY)


def runs(store, flow, n, **kw):
    return [execute_run(store, flow, parallelism=2, **kw) for _ in range(n)]


class TagCollector(HTMLParser):
    def __init__(self):
        super().__init__()
        self.tags: list[tuple[str, dict]] = []

    def handle_starttag(self, tag, attrs):
        self.tags.append((tag, dict(attrs)))


def tags(html: str | bytes, name: str) -> list[dict]:
    c = TagCollector()
    c.feed(html.decode() if isinstance(html, bytes) else html)
    return [a for t, a in c.tags if t == name]


# -- model -------------------------------------------------------------------


def test_k_selects_newest(store, toy):
    made = runs(store, toy, 5, params={"epochs": "3"})
    model = build_card_model(toy, store)
    assert model.k == DEFAULT_K == 2
    assert [r.run_id for r in model.selected_runs] == [made[4].run_id, made[3].run_id]
    assert model.scope == f"last-2:{made[4].run_id},{made[3].run_id}"


def test_zero_and_one_runs(store, toy):
    model = build_card_model(toy, store)
    assert model.selected_runs == [] and model.scope == "last-2:none"
    runs(store, toy, 1, params={"epochs": "3"})
    assert len(build_card_model(toy, store, k=2).selected_runs) == 1
    with pytest.raises(ValueError):
        build_card_model(toy, store, k=0)


def test_running_runs_excluded_failed_included(store, toy):
    store.create_run(toy, {})  # never executed: status running
    failed = execute_run(store, flow_from(TOY.replace('exec "true"', 'exec "false"', 1)), parallelism=1)
    model = build_card_model(toy, store, k=5)
    assert [r.run_id for r in model.selected_runs] == [failed.run_id]
    assert len(model.all_runs) == 2


def test_resolve_flow(store, toy, tmp_path):
    with pytest.raises(UnknownFlow):
        resolve_flow(store, "Toy")
    runs(store, toy, 1, params={"epochs": "3"})
    assert resolve_flow(store, "Toy").order == toy.order
    path = tmp_path / "toy.flow"
    path.write_text(TOY)
    assert resolve_flow(store, path).name == "Toy"


# -- renderers ---------------------------------------------------------------


def test_description_escaped(toy):
    html = render_description(toy)
    assert "Fits a line &amp; checks it &lt;carefully&gt;." in html
    assert "<carefully>" not in html
    empty = flow_from('flow E\nstep a\n  exec "true"\n')
    assert "No description" in render_description(empty)


def test_description_with_markup():
    flow = flow_from('flow E\ndoc "Trains <b>bold</b> models"\nstep a\n  exec "true"\n')
    assert "Trains &lt;b&gt;bold&lt;/b&gt; models" in render_description(flow)


def test_ownership_ratio_and_order(store, toy):
    for user in ["bob", "alice", "alice", "alice"]:
        store.create_run(toy, {}, user=user)
    html = render_ownership(store.list_runs("Toy"))
    bars = tags(html, "rect")
    assert [b["data-user"] for b in bars] == ["alice", "bob"]
    heights = [float(b["height"]) for b in bars]
    assert heights[0] / heights[1] == pytest.approx(3.0)
    assert html.index("<td>alice</td>") < html.index("<td>bob</td>")


def test_ownership_edge_cases(store, toy):
    assert "no runs yet" in render_ownership([])
    store.create_run(toy, {}, user="solo")
    [bar] = tags(render_ownership(store.list_runs("Toy")), "rect")
    assert float(bar["height"]) == 120.0


def test_ownership_ties_sorted_by_name(store, toy):
    for user in ["zed", "amy"]:
        store.create_run(toy, {}, user=user)
    bars = tags(render_ownership(store.list_runs("Toy")), "rect")
    assert [b["data-user"] for b in bars] == ["amy", "zed"]


def test_diamond_structure():
    flow = flow_from("""\
        flow D
        step a
          exec "true"
        step b after a
          exec "true"
        step c after a
          resources gpu
          exec "true"
        step d after b, c
          exec "true"
        """)
    html = render_structure_params(flow, [])
    waves = [g for g in tags(html, "g") if "wave" in g.get("class", "").split()]
    assert [w["data-wave"] for w in waves] == ["0", "1", "2"]
    assert [w["class"] for w in waves] == ["wave", "wave parallel", "wave"]
    assert len(tags(html, "rect")) == 4 + 1  # four nodes plus one parallel group
    gpu = [g for g in tags(html, "g") if "resource-gpu" in g.get("class", "")]
    assert [g["data-step"] for g in gpu] == ["c"]
    assert "[gpu]" in html


def test_bound_params_shown_with_defaults(store):
    flow = flow_from('flow P\nparam lr float default 0.01\nstep a\n  exec "true"\n')
    run = execute_run(store, flow, {"lr": "0.05"}, parallelism=1)
    html = render_structure_params(flow, [run])
    assert "<td>0.01</td><td>0.05</td>" in html
    assert f"run {run.run_id}" in html


def test_training_info(store, toy):
    made = runs(store, toy, 2, params={"epochs": "4"})
    model = build_card_model(toy, store)
    html = render_training_info(model.selected_runs, model.final_metrics, model.summaries)
    assert html.count("parameter count = 2") == 2
    cols = [d["data-run"] for d in tags(html, "div") if "data-run" in d]
    assert cols == [made[1].run_id, made[0].run_id]
    plain = flow_from('flow Q\nstep a\n  exec "true"\n')
    run = execute_run(store, plain, parallelism=1)
    html = render_training_info([run], {}, {run.run_id: None})
    assert "no architecture summary" in html and "no metrics recorded" in html


def test_loss_chart_vertices():
    s = MetricSeries("000001", "fit", "loss", tuple(MetricPoint(e, "loss", v) for e, v in [(1, 0.9), (2, 0.5), (3, 0.3)]))
    html = render_loss_chart({"000001": s})
    [line] = tags(html, "polyline")
    pts = [tuple(map(float, p.split(","))) for p in line["points"].split()]
    assert len(pts) == 3
    ys = [y for _, y in pts]
    assert ys[0] < ys[1] < ys[2]  # SVG y grows downwards, so a falling loss rises in pixels
    [svg] = tags(html, "svg")
    assert (svg["width"], svg["height"], svg["viewbox"]) == ("640", "320", "0 0 640 320")
    assert "no metrics recorded" in render_loss_chart({})


def test_loss_chart_two_runs(store, toy):
    runs(store, toy, 1, params={"epochs": "6"})
    runs(store, toy, 1, params={"epochs": "9"})
    model = build_card_model(toy, store)
    html = render_loss_chart(model.loss_series, [r.run_id for r in model.selected_runs])
    lines = tags(html, "polyline")
    assert [len(p["points"].split()) for p in lines] == [9, 6]
    assert len(tags(html, "li")) == 2


def test_behavior_banner(store, toy):
    [run] = runs(store, toy, 1, params={"epochs": "3"})
    report = run_behavior_suite(toy, run, store)
    html = render_behavior([run], {run.run_id: report})
    assert "2 passed, 1 failed, 0 errors" in html
    assert "banana" in html  # expected value shows up in the failure detail
    assert "no behavioral test report" in render_behavior([run], {})


# -- whole card --------------------------------------------------------------


def card_for(store, flow, **kw) -> bytes:
    return render_card(build_card_model(flow, store, **kw))


def test_seven_sections_in_order(store, toy):
    runs(store, toy, 1, params={"epochs": "3"})
    doc = card_for(store, toy).decode()
    ids = re.findall(r'<section id="([^"]+)"', doc)
    assert ids == list(SECTION_IDS)
    assert len(SECTION_IDS) == 7
    menu = [a["href"] for a in tags(doc, "a")]
    assert menu == [f"#{s}" for s in SECTION_IDS]


def test_card_without_runs(store, toy):
    doc = card_for(store, toy).decode()
    sections = split_sections(doc)
    assert list(sections) == list(SECTION_IDS)
    assert "Fits a line" in sections["description"]
    assert "no runs yet" in sections["ownership"]
    assert "placeholder" in sections["loss_chart"]


def test_render_is_deterministic(store, toy):
    runs(store, toy, 2, params={"epochs": "5"})
    h1, oid1 = generate_card(store, toy)
    h2, oid2 = generate_card(store, toy)
    assert h1 == h2 and oid1 == oid2
    assert [e["object"] for e in store.card_index("Toy")] == [oid1, oid2]


def test_self_contained(store, toy):
    runs(store, toy, 2, params={"epochs": "5"})
    doc = card_for(store, toy).decode()
    assert not re.search(r"(?i)https?://|\bsrc\s*=", doc)
    assert all(a["href"].startswith("#") for a in tags(doc, "a"))
    assert not tags(doc, "script") and not tags(doc, "link")


def test_hostile_text_escaped(store):
    flow = flow_from("""\
        flow Evil
        doc "<script>alert(1)</script> see http://example.com/x.png"
        step a
          doc "<img src=x onerror=alert(1)>"
          exec "true"
        behavior "<b>case</b>"
          via "echo '<i>'"
          expect equals "<u>"
        """)
    run = execute_run(store, flow, parallelism=1, user="<eve>")
    run_behavior_suite(flow, run, store)
    doc = card_for(store, flow).decode()
    assert "<script" not in doc and "<img" not in doc and "<b>case" not in doc
    assert "&lt;script&gt;" in doc and "&lt;eve&gt;" in doc
    assert not re.search(r"(?i)https?://|\bsrc\s*=", doc)


def test_external_section(store, toy):
    runs(store, toy, 1, params={"epochs": "3"})
    extra = external_section("extra", "echo '<section><h2>Extra</h2><p>run {run.id}</p></section>'", "Extra")
    doc = render_card(build_card_model(toy, store), default_providers() + [extra]).decode()
    assert re.findall(r'<section id="([^"]+)"', doc) == list(SECTION_IDS) + ["extra"]
    assert len(tags(doc, "a")) == 8
    assert "run 000001" in split_sections(doc)["extra"]


def test_external_section_failures(store, toy):
    model = build_card_model(toy, store)
    with pytest.raises(ProviderError):
        render_card(model, default_providers() + [external_section("x", "exit 4")])
    with pytest.raises(MalformedFragment):
        render_card(model, default_providers() + [external_section("x", "echo '<div><p>oops</div>'")])
    with pytest.raises(MalformedFragment):
        render_card(model, default_providers() + [external_section("x", "echo '<img src=\"http://a/b.png\">'")])
    with pytest.raises(ValueError):
        external_section("loss_chart", "true")


def test_missing_builtin_provider(store, toy):
    model = build_card_model(toy, store)
    with pytest.raises(ProviderError):
        render_card(model, default_providers()[:-1])
    dup = default_providers() + [SectionProvider("loss_chart", "again", lambda m: "")]
    with pytest.raises(ProviderError):
        render_card(model, dup)


@pytest.mark.parametrize(
    "fragment",
    ["<p>ok</p>", "<table><tr><td>x</td></tr></table>", "<br><hr>", '<a href="#x">in-page</a>', "text only"],
)
def test_fragment_accepted(fragment):
    check_fragment(fragment)


@pytest.mark.parametrize(
    "fragment",
    ["<p>", "</p>", "<b><i></b></i>", '<a href="https://x">x</a>', '<a href="page.html">x</a>', '<img src="a.png">'],
)
def test_fragment_rejected(fragment):
    with pytest.raises(MalformedFragment):
        check_fragment(fragment)


def test_freshness(store, toy):
    runs(store, toy, 1, params={"epochs": "3"})
    before = card_for(store, toy)
    runs(store, toy, 1, params={"epochs": "4"}, user="newcomer")
    after = card_for(store, toy)
    assert flow_level_view(before) == flow_level_view(after)
    assert set(flow_level_view(before)) == {"title_menu", "description", "ownership", "structure_params"}
    s1, s2 = split_sections(before), split_sections(after)
    for sid in ("training_info", "loss_chart", "behavioral_tests"):
        assert s1[sid] != s2[sid]
    assert s1["description"] == s2["description"] and s1["title_menu"] == s2["title_menu"]
