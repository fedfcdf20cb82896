import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest
from hypothesis import assume, given, strategies as st

import champaign
from ctxgraph._http import InFlightGate, TokenBucket
from ctxgraph.graph import normalize_surface
from ctxgraph.llm import (ECHO_CANDIDATES, HttpBackend, LlmParseError, LlmTransportError, Rule, ScriptedBackend,
                          complete, fingerprint, render)
from ctxgraph.llm.backends import TransportError
from ctxgraph.llm.parsing import ReplyParseError, parse_list, parse_selection, parse_sufficiency, split_items
from ctxgraph.llm.templates import (ANSWER_PREFIX, ORDER_PREFIX, MissingSlotError, UnknownTemplateError,
                                    bracket_list, load_reasoning_shots, question_text, relation_phrase)

BASE = {"known": "Champaign", "relation": champaign.ADJOINS, "missing": "head"}


def ranking_bundle(cands):
    return render("kgc.ranking", {**BASE, "candidates": cands})


# ---------------------------------------------------------------- templates

def test_reasoning_template_variants():
    ctx = render("kgc.reasoning.contextual", {**BASE, "paragraph": champaign.PARAGRAPH})
    assert "Output all the possible answers you can find in the materials" in ctx.text
    assert ctx.template_id == "kgc.reasoning.contextual"
    bare = render("kgc.reasoning.contextual", {**BASE, "paragraph": ""})
    assert "Output all some possible answers based on your own knowledge" in bare.text
    assert bare.template_id == "kgc.reasoning"
    assert ctx.prefix == ANSWER_PREFIX and ctx.text.endswith("\n")


def test_ranking_template_six_candidates():
    b = ranking_bundle(["A", "B", "C", "D", "E", "F"])
    assert "please start your response with 'The final order:'" in b.text
    assert b.candidates == ("A", "B", "C", "D", "E", "F") and b.prefix == ORDER_PREFIX


def test_missing_and_unknown_template():
    with pytest.raises(MissingSlotError) as exc:
        render("kgc.ranking", BASE)
    assert exc.value.slot == "candidates"
    with pytest.raises(UnknownTemplateError):
        render("kgc.nope", BASE)


def test_question_phrasing():
    assert relation_phrase("/location/adjoining_relationship/adjoins") == "location adjoining_relationship adjoins"
    assert question_text("Champaign", champaign.ADJOINS, "head") == \
        "Champaign is the adjoins of what location? The answer is "
    assert question_text("Champaign", champaign.ADJOINS, "tail") == "What is the adjoins of Champaign? The answer is "


def test_bundle_provenance_and_shots():
    b = render("qa.reason", {"question": "Q?", "paths": ["(a, r, b)"], "contexts": ["a is b."]})
    assert "a is b." in b.provenance
    assert len(load_reasoning_shots()) == 5
    assert "## Example 5" in b.text


def test_qa_selection_template_counts_choices():
    b = render("qa.select_queries", {"question": "q", "path": "", "queries": ["x", "y", "z"], "width": 2})
    assert b.choices == 3 and "1. x" in b.text


# ---------------------------------------------------------------- parsing

def test_parse_reasoning_reply():
    b = render("kgc.reasoning.contextual", {**BASE, "paragraph": champaign.PARAGRAPH})
    got = complete(ScriptedBackend(default=champaign.REASONING_REPLY), b, retries=0)
    assert list(got.items) == ["Urbana", "Champaign County", "Illinois Silicon Prairie", "Parkland College"]


def test_parse_rerank_reply():
    b = ranking_bundle(["Cook County", "Champaign County", "Bloomington", "Evanston", "Urbana"])
    got = complete(ScriptedBackend(default=champaign.RERANK_REPLY), b, retries=0)
    assert got.items[0] == "Urbana"


def test_garbage_reply_raises_parse_error_with_raw():
    b = ranking_bundle(["A", "B"])
    with pytest.raises(LlmParseError) as exc:
        complete(ScriptedBackend(default="no idea"), b, retries=0)
    assert exc.value.raw == "no idea" and exc.value.attempts == 1


def test_retry_recovers_after_bad_reply():
    replies = iter(["junk", "The final order: [B, A]"])
    backend = ScriptedBackend(default=lambda bundle: next(replies))
    assert list(complete(backend, ranking_bundle(["A", "B"]), retries=1).items) == ["B", "A"]


def test_transport_failure_exhausts_retries():
    calls = []

    class Down:
        def generate(self, bundle):
            calls.append(1)
            raise TransportError("down", raw="503")

        def identity(self):
            return {}

    with pytest.raises(LlmTransportError) as exc:
        complete(Down(), ranking_bundle(["A"]), retries=2)
    assert len(calls) == 3 and exc.value.raw == "503"


def test_comma_labels_resolved_with_vocabulary():
    vocab = {normalize_surface(x) for x in ["Washington, D.C.", "Paris", "Urbana"]}
    assert split_items("Paris, Washington, D.C., Urbana", vocab) == ["Paris", "Washington, D.C.", "Urbana"]
    assert split_items("Paris, Washington, D.C., Urbana") == ["Paris", "Washington", "D.C.", "Urbana"]


def test_unbracketed_trailing_period_stripped():
    assert parse_list("The possible answers: A, B.", ANSWER_PREFIX) == ["A", "B"]
    assert parse_list("The possible answers: [A, B.]", ANSWER_PREFIX) == ["A", "B."]
    with pytest.raises(ReplyParseError):
        parse_list("The possible answers: []", ANSWER_PREFIX)


def test_selection_and_sufficiency():
    assert parse_selection("The selected queries: [2, 1, 2]", "The selected queries:", 3) == (2, 1)
    with pytest.raises(ReplyParseError):
        parse_selection("The selected queries: [4]", "The selected queries:", 3)
    assert not parse_sufficiency("Sufficient: No").sufficient
    yes = parse_sufficiency("Sufficient: Yes\nThe possible answers: [Urbana]")
    assert yes.sufficient and yes.items == ("Urbana",)
    with pytest.raises(ReplyParseError):
        parse_sufficiency("Sufficient: maybe")


label_text = st.text(alphabet="abcdefgh XYZ.,'-", min_size=1, max_size=14)


@given(st.lists(label_text, min_size=1, max_size=8))
def test_render_parse_round_trip(labels):
    cleaned = [" ".join(lab.split()) for lab in labels]
    cleaned = [c.strip(" '\"`*") for c in cleaned]
    assume(all(cleaned))
    keys = [normalize_surface(c) for c in cleaned]
    assume(len(set(keys)) == len(keys))
    vocab = set(keys)
    # a comma-joined run of labels must not itself be a label (that reply would be ambiguous)
    for i in range(len(cleaned)):
        for j in range(i + 2, len(cleaned) + 1):
            assume(normalize_surface(", ".join(cleaned[i:j])) not in vocab)
    for c in cleaned:
        assume(not c.startswith(",") and not c.endswith(","))
        assume(all(normalize_surface(p.strip(" '\"`*")) for p in c.split(",")) or c in cleaned)
    bundle = ranking_bundle(cleaned)
    raw = f"{ORDER_PREFIX} {bracket_list(cleaned)}"
    parsed = complete(ScriptedBackend(default=raw), bundle, retries=0)
    assert list(parsed.items) == cleaned


# ---------------------------------------------------------------- scripted

def test_scripted_rules_and_echo(tmp_path):
    b = ranking_bundle(["A", "B"])
    script = tmp_path / "s.jsonl"
    script.write_text(json.dumps({"match": fingerprint(b.text), "reply": "The final order: [B, A]"}) + "\n"
                      + json.dumps({"match": "never", "reply": "x"}) + "\n", encoding="utf-8")
    backend = ScriptedBackend.from_jsonl(script, default=ECHO_CANDIDATES)
    assert backend.generate(b) == "The final order: [B, A]"
    assert backend.generate(ranking_bundle(["C", "D"])) == "The final order: [C, D]"
    assert backend.identity()["name"].startswith("scripted:")
    with pytest.raises(TransportError):
        ScriptedBackend().generate(b)


def test_scripted_bad_line(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text("{not json}\n", encoding="utf-8")
    with pytest.raises(ValueError, match=":1:"):
        ScriptedBackend.from_jsonl(p)


# ---------------------------------------------------------------- http

def chat_response(content):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": content}}]})


def test_http_payload_and_auth(monkeypatch):
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return chat_response("The final order: [B, A]")

    monkeypatch.setenv("TEST_LLM_KEY", "sk-test")
    backend = HttpBackend("http://llm/v1/chat/completions", "m1", api_key_env="TEST_LLM_KEY",
                          client=httpx.Client(transport=httpx.MockTransport(handler)))
    b = ranking_bundle(["A", "B"]).with_preamble(["demo"])
    assert list(complete(backend, b).items) == ["B", "A"]
    assert seen["auth"] == "Bearer sk-test"
    assert seen["body"]["temperature"] == 0.0 and seen["body"]["model"] == "m1"
    assert [m["content"] for m in seen["body"]["messages"]] == ["demo", b.text]


@pytest.mark.parametrize("resp", [httpx.Response(500, text="boom"), httpx.Response(200, json={"x": 1})])
def test_http_errors_become_transport_errors(resp):
    backend = HttpBackend("http://llm", "m", api_key_env=None, client=httpx.Client(
        transport=httpx.MockTransport(lambda r: resp)))
    with pytest.raises(LlmTransportError):
        complete(backend, ranking_bundle(["A", "B"]), retries=1)


def test_http_never_exceeds_in_flight_limit():
    limit = 3
    lock = threading.Lock()
    state = {"active": 0, "peak": 0}

    def handler(request):
        with lock:
            state["active"] += 1
            state["peak"] = max(state["peak"], state["active"])
        time.sleep(0.005)
        with lock:
            state["active"] -= 1
        return chat_response("The final order: [A, B]")

    backend = HttpBackend("http://llm", "m", api_key_env=None, max_in_flight=limit,
                          client=httpx.Client(transport=httpx.MockTransport(handler)))
    b = ranking_bundle(["A", "B"])
    with ThreadPoolExecutor(16) as pool:
        results = list(pool.map(lambda _: complete(backend, b), range(120)))
    assert len(results) == 120
    assert state["peak"] <= limit and backend.gate.peak <= limit
    assert state["peak"] >= 2  # the stress actually overlapped requests


def test_token_bucket_with_fake_clock():
    now = [0.0]
    slept = []

    def sleep(dt):
        slept.append(dt)
        now[0] += dt

    bucket = TokenBucket(2.0, burst=1, clock=lambda: now[0], sleep=sleep)
    for _ in range(5):
        bucket.acquire()
    assert now[0] == pytest.approx(2.0)  # 4 waits of 0.5 s after the initial token


def test_gate_validation():
    with pytest.raises(ValueError):
        InFlightGate(0)
    with pytest.raises(ValueError):
        TokenBucket(0)
