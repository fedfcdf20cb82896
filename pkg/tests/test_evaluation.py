import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctxgraph.evaluation import (EvalQuery, FilterIndex, MissingAnswerError, aggregate, em_score, evaluation_queries,
                                 exact_match, filtered_rank, long_tail_buckets, score_ranks, write_report)
from ctxgraph.graph import ContextGraph, EntityContext, Relation
from ctxgraph.ranking import RankedList


def graph():
    # x and y are both true tails of (k, r, ?); gt is the test answer
    return ContextGraph.from_triples({"train": [("k", "r", "x"), ("k", "r", "y"), ("z", "r", "k")],
                                      "test": [("k", "r", "gt")]})


def ranked(g, ids):
    return RankedList(np.array([g.entity_index(e) for e in ids]), g.entity_ids)


def test_other_answers_ahead_are_filtered():
    g = graph()
    filt = FilterIndex(g)
    q = EvalQuery("k", Relation("r"), "gt", "tail")
    assert filtered_rank(ranked(g, ["x", "gt", "y", "k", "z"]), q, filt) == 1
    # a non-answer ahead still counts
    assert filtered_rank(ranked(g, ["z", "x", "gt", "y", "k"]), q, filt) == 2
    assert filtered_rank(ranked(g, ["gt", "x", "y", "k", "z"]), q, filt) == 1


def test_raw_position_without_filter_members():
    g = graph()
    filt = FilterIndex(g, splits=("test",))
    q = EvalQuery("k", Relation("r"), "gt", "tail")
    assert filtered_rank(ranked(g, ["x", "y", "z", "gt", "k"]), q, filt) == 4


def test_head_query_filters_through_reverse():
    g = graph()
    filt = FilterIndex(g)
    assert filt.answers("k", Relation("r", True)) == frozenset({"z"})
    q = EvalQuery("x", Relation("r", True), "k", "head")
    assert filtered_rank(ranked(g, ["z", "k", "x", "y", "gt"]), q, filt) == 2


def test_missing_answer():
    g = graph()
    q = EvalQuery("k", Relation("r"), "gt", "tail")
    with pytest.raises(MissingAnswerError):
        filtered_rank(ranked(g, ["x", "y"]), q, FilterIndex(g))


def test_evaluation_queries_both_directions():
    g = graph()
    qs = evaluation_queries(g, "test")
    assert [(q.known, str(q.relation), q.answer, q.direction) for q in qs] == [
        ("k", "r", "gt", "tail"), ("gt", "r^-1", "k", "head")]
    assert all(q.triple == ("k", "r", "gt") for q in qs)


def test_mrr_and_hits_examples():
    rep = aggregate([1, 2, 4])
    assert rep.mrr == pytest.approx(0.58333, abs=1e-5)
    assert rep.hits == {1: pytest.approx(1 / 3), 3: pytest.approx(2 / 3), 10: 1.0}
    assert aggregate([11]).hits[10] == 0.0
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([0])


def test_long_tail_buckets_example():
    ranks = np.array([1, 1, 2, 5, 10])
    degrees = np.array([0, 9, 99, 999, 9999])
    edges, buckets = long_tail_buckets(ranks, degrees, 4)
    assert edges == pytest.approx([0, 1, 2, 3, 4])
    assert [b.count for b in buckets] == [1, 1, 1, 2]
    assert buckets[-1].mrr == pytest.approx((1 / 5 + 1 / 10) / 2)


@given(st.lists(st.tuples(st.integers(1, 50), st.integers(0, 500)), min_size=1, max_size=60))
def test_bucket_counts_partition_queries(pairs):
    ranks = np.array([p[0] for p in pairs])
    degs = np.array([p[1] for p in pairs])
    edges, buckets = long_tail_buckets(ranks, degs)
    assert sum(b.count for b in buckets) == len(pairs)
    assert edges == sorted(edges)
    for b in buckets:
        if b.count:
            assert 0 <= b.hits1 <= b.mrr <= 1


@given(st.lists(st.integers(1, 30), min_size=1, max_size=40))
def test_metrics_bounded_and_monotone(ranks):
    rep = aggregate(ranks)
    assert 0 < rep.mrr <= 1
    assert rep.hits[1] <= rep.hits[3] <= rep.hits[10]
    assert rep.hits[1] <= rep.mrr


@given(st.data())
def test_filtered_rank_at_most_raw(data):
    n = data.draw(st.integers(2, 12))
    perm = data.draw(st.permutations(range(n)))
    gold = data.draw(st.integers(0, n - 1))
    members = sorted(data.draw(st.sets(st.integers(0, n - 1), max_size=n)) - {gold})
    scores = np.zeros((1, n))
    scores[0, list(perm)] = -np.arange(n)  # perm[0] scores best
    rank = score_ranks(scores, np.array([gold]), np.array([0, len(members)]), np.array(members, dtype=np.int64))[0]
    raw = list(perm).index(gold) + 1
    assert 1 <= rank <= raw
    assert rank == raw - sum(1 for e in perm[:raw - 1] if e in members)


def test_exact_match_case_and_alias():
    g = ContextGraph.from_triples({"train": [("q1", "r", "q2")]})
    g.set_entity_context("q1", EntityContext("Istanbul", aliases=("Constantinople",)))
    assert exact_match(["  istanbul "], ["Istanbul"]) == 1
    assert exact_match(["Constantinople"], ["Istanbul"]) == 0
    assert exact_match(["Constantinople"], ["Istanbul"], g) == 1
    assert exact_match([], ["Istanbul"]) == 0
    assert exact_match([""], [""]) == 0
    with pytest.raises(ValueError):
        exact_match(["x"], [])
    assert em_score([(["a"], ["A"]), (["b"], ["c"])]) == 0.5


def test_write_report(tmp_path):
    g = graph()
    qs = evaluation_queries(g, "test")
    rep = aggregate([1, 3], [2, 1])
    jpath, tpath = write_report(rep, qs, tmp_path, extra={"note": 1})
    payload = json.loads(jpath.read_text(encoding="utf-8"))
    assert payload["count"] == 2 and payload["note"] == 1 and payload["hits"]["3"] == 1.0
    with tpath.open(encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    assert rows[0] == ["head", "relation", "tail", "direction", "rank"]
    assert rows[2] == ["k", "r", "gt", "head", "3"]
