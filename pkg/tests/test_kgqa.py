import json

import pytest

from ctxgraph import kgqa
from ctxgraph.graph import ContextGraph, EntityContext, Relation
from ctxgraph.kgqa import (BeamState, Hop, InvariantViolation, NoTopicEntityError, QaItem, QaParams, ReasoningPath,
                           answer_all, answer_question, check_state, explore, identify_topic_entities,
                           load_qa_dataset, merge_contexts, prune)
from ctxgraph.llm import ScriptedBackend
from ctxgraph.textsim import LexicalScorer
from ctxgraph.toy import chain_graph, label_toy_entities

LABELS = {
    "m.alice": ("Alice", "Alice works at Acme. Alice was born in Lyon."),
    "m.acme": ("Acme", "Acme is a company based in Paris. Acme makes anvils."),
    "m.paris": ("Paris", "Paris is the capital of France."),
    "m.lyon": ("Lyon", None),
    "m.jazz": ("Jazz", None),
    "m.sorbonne": ("Sorbonne", None),
    "m.bob": ("Bob", None),
    "m.hermit": ("Hermit", None),
}


def world() -> ContextGraph:
    g = ContextGraph.from_triples({
        "train": [("m.alice", "/people/works_at", "m.acme"), ("m.acme", "/org/based_in", "m.paris"),
                  ("m.alice", "/people/born_in", "m.lyon"), ("m.alice", "/people/likes", "m.jazz"),
                  ("m.alice", "/people/studied_at", "m.sorbonne"), ("m.alice", "/people/knows", "m.bob")],
        "test": [("m.hermit", "/people/knows", "m.bob")],
    })
    for e, (label, para) in LABELS.items():
        g.set_entity_context(e, EntityContext(label, wiki_paragraph=para))
    return g


def backend(**replies):
    """Replies keyed by template id (dots as underscores); lists are consumed in order."""
    calls = []

    def reply(bundle):
        calls.append(bundle.template_id)
        r = replies.get(bundle.template_id.replace(".", "_"), "no idea")
        if isinstance(r, list):
            return r.pop(0) if len(r) > 1 else r[0]
        return r(bundle) if callable(r) else r

    b = ScriptedBackend(default=reply)
    b.calls = calls
    return b


QUESTION = "Which city is the company Alice works at based in?"


def state_at(e, question=QUESTION):
    return BeamState(question, [e], [ReasoningPath(e)])


def test_topic_entities_resolved_and_deduplicated():
    g = world()
    llm = backend(qa_topic="The topic entities: [alice, Nobody, Alice, Acme]")
    assert identify_topic_entities(llm, g.freeze() or g, QUESTION) == ["m.alice", "m.acme"]
    with pytest.raises(NoTopicEntityError):
        identify_topic_entities(backend(qa_topic="The topic entities: [Nobody]"), g, QUESTION)
    with pytest.raises(NoTopicEntityError):
        identify_topic_entities(backend(), g, QUESTION, retries=0)


def test_explore_selects_m_of_five_relations():
    g = world()
    g.freeze()
    params = QaParams(M=3)
    rels = g.relations_of("m.alice")
    assert len(rels) == 5
    llm = backend(qa_select_queries="The selected queries: [5, 1, 3]")
    trace = []
    cands = explore(g, llm, LexicalScorer(), state_at("m.alice"), params, trace)
    assert [c.query for c in cands] == [rels[4], rels[0], rels[2]]
    assert trace[0]["by"] == "llm"
    # unusable reply falls back to similarity, still width M
    cands = explore(g, backend(), LexicalScorer(), state_at("m.alice"), QaParams(M=3, retries=0), trace)
    assert len({c.query for c in cands}) == 3 and trace[-1]["by"] == "similarity"


def test_explore_single_relation_needs_no_model():
    g = world()
    g.freeze()
    llm = backend()
    cands = explore(g, llm, LexicalScorer(), state_at("m.acme"), QaParams(M=3))
    assert {c.hop.t for c in cands} == {"m.paris", "m.alice"}
    assert llm.calls == []


def test_explore_dead_end_stalls():
    g = world()
    g.freeze()
    st = state_at("m.hermit")
    assert explore(g, backend(), LexicalScorer(), st, QaParams()) == []
    assert prune(g, backend(), LexicalScorer(), st, [], QaParams()).stalled


def test_explore_skips_visited_entities():
    g = world()
    g.freeze()
    path = ReasoningPath("m.alice").extend(Hop("m.alice", Relation("/people/works_at"), "m.acme"))
    st = BeamState(QUESTION, ["m.alice"], [path])
    assert {c.hop.t for c in explore(g, backend(), LexicalScorer(), st, QaParams())} == {"m.paris"}


def test_prune_respects_width_and_continuity():
    g = world()
    g.freeze()
    params = QaParams(M=2, N=3)
    st = state_at("m.alice")
    cands = explore(g, backend(qa_select_queries="The selected queries: [1, 2]"), LexicalScorer(), st, params)
    out = prune(g, backend(), LexicalScorer(), st, cands, params)
    assert len(out.paths) <= 2 and len(out.context_list) <= 3 and out.iteration == 1
    assert all(p.is_continuous() and p.hops[0].h == "m.alice" for p in out.paths)
    check_state(out, params)


def test_merge_contexts_cap_and_dedup():
    sc = LexicalScorer()
    sents = [f"sentence {i} about paris." for i in range(15)]
    merged = merge_contexts(sc, "paris", [(sents[0], 1.0)], sents, 10)
    assert len(merged) == 10 and len({t for t, _ in merged}) == 10
    assert merge_contexts(sc, "q", [], [], 10) == []


def chain():
    g = chain_graph(8)
    label_toy_entities(g)
    return g


def test_reason_schedule_three_iterations():
    g = chain()
    llm = backend(qa_reason=["Sufficient: No", "Sufficient: No", "Sufficient: Yes\nThe possible answers: [Delta Alpha 3]"])
    res = answer_question(g, llm, None, "Where does the chain lead?", QaParams(M=3, D_max=3), topic_entities=["n00"])
    assert res.iterations == 3 and not res.forced
    assert res.entities == ["n03"]
    events = [ev["event"] for ev in res.trace]
    assert events.count("reason") == 3 and events.count("forced") == 0 and events[-1] == "answer"


def test_forced_answer_exactly_once():
    g = chain()
    llm = backend(qa_reason="Sufficient: No", qa_forced="The possible answers: [Delta Alpha 3]")
    res = answer_question(g, llm, None, "Where does the chain lead?", QaParams(M=3, D_max=3), topic_entities=["n00"])
    assert res.forced and res.iterations == 3 and res.entities == ["n03"]
    events = [ev["event"] for ev in res.trace]
    assert events.count("reason") == 3 and events.count("forced") == 1


def test_two_hop_answer():
    g = world()

    def reason_reply(bundle):
        if "(Acme, org based in, Paris)" in bundle.text:
            return "Sufficient: Yes\nThe possible answers: [Paris]"
        return "Sufficient: No"

    llm = backend(qa_select_queries="The selected queries: [5]", qa_reason=reason_reply)
    res = answer_question(g, llm, None, QUESTION, QaParams(M=1, D_max=3), topic_entities=["m.alice"])
    assert res.answers == ["Paris"] and res.entities == ["m.paris"]
    assert res.iterations == 2 and not res.forced
    prunes = [ev for ev in res.trace if ev["event"] == "prune"]
    assert prunes[-1]["paths"] == ["(Alice, people works at, Acme) -> (Acme, org based in, Paris)"]


def test_no_path_goes_straight_to_forced():
    g = world()
    llm = backend(qa_forced="The possible answers: [Bob]")
    res = answer_question(g, llm, None, "Who does the hermit know?", QaParams(), topic_entities=["m.hermit"])
    assert res.forced and res.iterations == 0 and res.answers == ["Bob"]
    assert [ev["event"] for ev in res.trace] == ["question", "topics", "explore", "stall", "forced", "answer"]


def test_trace_replays_identically():
    def run():
        llm = backend(qa_topic="The topic entities: [Alice]", qa_select_queries="The selected queries: [2, 4]",
                      qa_reason="Sufficient: No", qa_forced="The possible answers: [Acme]")
        return json.dumps(answer_question(world(), llm, None, QUESTION, QaParams(M=2)).trace, sort_keys=True)
    assert run() == run()


def test_check_state_detects_violations():
    params = QaParams(M=1, N=1, D_max=1)
    with pytest.raises(InvariantViolation):
        check_state(BeamState("q", ["a", "b"], [ReasoningPath("a"), ReasoningPath("b")]), params)
    with pytest.raises(InvariantViolation):
        check_state(BeamState("q", ["a"], [ReasoningPath("a")], [("x", 1.0), ("y", 0.5)]), params)
    broken = ReasoningPath("a", (Hop("b", Relation("r"), "c"),))
    with pytest.raises(InvariantViolation):
        check_state(BeamState("q", ["a"], [broken]), params)
    with pytest.raises(InvariantViolation):
        ReasoningPath("a").extend(Hop("z", Relation("r"), "c"))


def test_load_qa_dataset(tmp_path):
    p = tmp_path / "qa.jsonl"
    p.write_text(json.dumps({"question": "q?", "answers": ["Paris"], "topic_entities": ["m.alice"]}) + "\n\n"
                 + json.dumps({"question": "r?", "answers": []}) + "\n", encoding="utf-8")
    assert load_qa_dataset(p) == [QaItem("q?", ("Paris",), ("m.alice",)), QaItem("r?", ())]
    p.write_text('{"answers": []}\n', encoding="utf-8")
    with pytest.raises(ValueError, match=":1:"):
        load_qa_dataset(p)


def test_answer_all_keeps_order_and_absorbs_missing_topics():
    g = world()
    items = [QaItem(QUESTION, ("Paris",), ("m.alice",)), QaItem("??", (), ("m.nowhere",))]
    llm = backend(qa_select_queries="The selected queries: [1]", qa_reason="Sufficient: Yes\nThe possible answers: [Paris]")
    res = answer_all(g, llm, None, items, QaParams(workers=2))
    assert [r.question for r in res] == [QUESTION, "??"]
    assert res[1].answers == [] and res[1].trace[0]["event"] == "error"


def test_params_validation():
    with pytest.raises(ValueError):
        QaParams(M=0)
    with pytest.raises(ValueError):
        QaParams(retries=-1)


def test_answer_question_checks_state_every_step(monkeypatch):
    seen = []
    monkeypatch.setattr(kgqa, "check_state", lambda st, p: seen.append(st.iteration))
    llm = backend(qa_reason="Sufficient: No", qa_forced="The possible answers: [Paris]")
    answer_question(chain(), llm, None, "q", QaParams(M=1, D_max=2), topic_entities=["n00"])
    assert seen == [0, 1, 2]
