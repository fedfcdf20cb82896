"""Iterative question answering over a context graph.

A beam of at most ``M`` reasoning paths starts at the question's topic
entities. Each iteration:

* explore - for every path, the relations at its tail entity become queries
  ``(e, r, ?)``; if there are more than ``M`` the model picks ``M``;
* prune - every candidate triple gets up to ``gamma`` context sentences, the
  model keeps ``M`` triples per query, and the ``M`` most relevant survivors
  overall extend the beam; their sentences join a context list capped at ``N``;
* reason - the model says whether paths plus contexts suffice and, if so,
  answers.

After ``D_max`` insufficient iterations, or when no path can be extended, one
forced answer is requested.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import ContextGraph, Relation
from .ingest import relation_words, select_supporting_sentences, split_sentences, verbalize_triple
from .llm import LlmBackend, LlmCallError, complete, fingerprint, render
from .textsim import LexicalScorer, SimilarityScorer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QaParams:
    M: int = 3
    N: int = 10
    gamma: int = 3
    D_max: int = 3
    max_topics: int = 3
    retries: int = 2
    workers: int = 1

    def __post_init__(self):
        for name in ("M", "N", "gamma", "D_max", "max_topics", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class NoTopicEntityError(LookupError):
    pass


class InvariantViolation(AssertionError):
    pass


@dataclass(frozen=True)
class Hop:
    h: str
    r: Relation
    t: str
    context: tuple[str, ...] = ()


@dataclass(frozen=True)
class ReasoningPath:
    origin: str
    hops: tuple[Hop, ...] = ()

    @property
    def tail(self) -> str:
        return self.hops[-1].t if self.hops else self.origin

    def entities(self) -> set[str]:
        return {self.origin, *(hop.t for hop in self.hops)}

    def extend(self, hop: Hop) -> "ReasoningPath":
        if hop.h != self.tail:
            raise InvariantViolation(f"hop {hop.h} does not continue path ending at {self.tail}")
        return ReasoningPath(self.origin, self.hops + (hop,))

    def is_continuous(self) -> bool:
        prev = self.origin
        for hop in self.hops:
            if hop.h != prev:
                return False
            prev = hop.t
        return True


@dataclass
class BeamState:
    question: str
    topic_entities: list[str]
    paths: list[ReasoningPath]
    context_list: list[tuple[str, float]] = field(default_factory=list)
    iteration: int = 0
    stalled: bool = False


@dataclass(frozen=True)
class Candidate:
    path_index: int
    query: Relation
    hop: Hop


@dataclass
class QaResult:
    question: str
    answers: list[str]
    entities: list[str | None]
    iterations: int
    forced: bool
    trace: list[dict] = field(repr=False)


# ---------------------------------------------------------------- rendering

def _relation_text(r: Relation) -> str:
    words = relation_words(r.raw)
    return f"inverse of {words}" if r.reversed else words


def render_hop(graph: ContextGraph, hop: Hop) -> str:
    return f"({graph.label_of(hop.h)}, {_relation_text(hop.r)}, {graph.label_of(hop.t)})"


def render_path(graph: ContextGraph, path: ReasoningPath) -> str:
    if not path.hops:
        return f"({graph.label_of(path.origin)})"
    return " -> ".join(render_hop(graph, hop) for hop in path.hops)


def render_query(graph: ContextGraph, e: str, r: Relation) -> str:
    return f"({graph.label_of(e)}, {_relation_text(r)}, ?)"


def check_state(state: BeamState, params: QaParams) -> None:
    if len(state.paths) > params.M:
        raise InvariantViolation(f"beam holds {len(state.paths)} paths, width is {params.M}")
    if len(state.context_list) > params.N:
        raise InvariantViolation(f"context list holds {len(state.context_list)} sentences, cap is {params.N}")
    if state.iteration > params.D_max:
        raise InvariantViolation(f"iteration {state.iteration} exceeds D_max {params.D_max}")
    for p in state.paths:
        if not p.is_continuous():
            raise InvariantViolation(f"broken reasoning path from {p.origin}")


def _snapshot(graph: ContextGraph, state: BeamState) -> dict:
    return {"iteration": state.iteration, "paths": [render_path(graph, p) for p in state.paths],
            "context": [t for t, _ in state.context_list], "stalled": state.stalled}


# ---------------------------------------------------------------- steps

def identify_topic_entities(llm: LlmBackend, graph: ContextGraph, question: str, max_topics: int = 3,
                            retries: int = 2, trace: list | None = None) -> list[str]:
    bundle = render("qa.topic", {"question": question}, vocabulary=graph.surface_keys())
    try:
        reply = complete(llm, bundle, retries)
    except LlmCallError as exc:
        raise NoTopicEntityError(f"no topic entities for {question!r}: {exc}") from exc
    found = []
    for item in reply.items:
        e = graph.resolve_entity(item)
        if e is not None and e not in found:
            found.append(e)
    if trace is not None:
        trace.append({"event": "topics", "prompt": fingerprint(bundle.text), "raw": reply.raw, "entities": found})
    if not found:
        raise NoTopicEntityError(f"no resolvable topic entity in {list(reply.items)!r}")
    return found[:max_topics]


def explore(graph: ContextGraph, llm: LlmBackend, scorer: SimilarityScorer, state: BeamState, params: QaParams,
            trace: list | None = None) -> list[Candidate]:
    """Candidate extensions for every path; entities already on a path are not revisited."""
    out: list[Candidate] = []
    for pi, path in enumerate(state.paths):
        e = path.tail
        visited = path.entities()
        fresh = [q for q in graph.neighbors(e, "out") if q.t not in visited]
        live = {q.r for q in fresh}
        rels = [r for r in graph.relations_of(e) if r in live]
        chosen = rels
        how = "all"
        if len(rels) > params.M:
            queries = [render_query(graph, e, r) for r in rels]
            bundle = render("qa.select_queries", {"question": state.question, "path": render_path(graph, path),
                                                  "queries": queries, "width": params.M})
            try:
                reply = complete(llm, bundle, params.retries)
                chosen = [rels[i - 1] for i in reply.indices[:params.M]]
                how = "llm"
            except LlmCallError as exc:
                log.info("query selection fell back to text similarity: %s", exc)
                s = np.asarray(scorer.scores(state.question, [_relation_text(r) for r in rels]), dtype=float)
                chosen = [rels[i] for i in np.argsort(-s, kind="stable")[:params.M]]
                how = "similarity"
        for r in chosen:
            out += [Candidate(pi, r, Hop(q.h, q.r, q.t)) for q in fresh if q.r == r]
        if trace is not None:
            trace.append({"event": "explore", "iteration": state.iteration + 1, "path": render_path(graph, path),
                          "relations": [str(r) for r in rels], "selected": [str(r) for r in chosen], "by": how})
    return out


def context_sentences(graph: ContextGraph, scorer: SimilarityScorer, hop: Hop, gamma: int) -> tuple[str, ...]:
    """Stored relation context if present, else top-``gamma`` sentences of the endpoints' paragraphs."""
    rc = graph.relation_context(hop.h, hop.r, hop.t)
    if rc is not None and len(rc):
        return tuple(rc.texts(gamma))
    sents = []
    for e in (hop.h, hop.t):
        ctx = graph.entity_contexts.get(e)
        if ctx and ctx.wiki_paragraph:
            sents += split_sentences(ctx.wiki_paragraph)
    if not sents:
        return ()
    return tuple(select_supporting_sentences(scorer, verbalize_triple(graph, hop.h, hop.r, hop.t), sents, gamma).texts())


def _relevance(graph: ContextGraph, scorer: SimilarityScorer, question: str, hop: Hop) -> float:
    texts = [verbalize_triple(graph, hop.h, hop.r, hop.t), *hop.context]
    return float(np.max(scorer.scores(question, texts)))


def merge_contexts(scorer: SimilarityScorer, question: str, current: Sequence[tuple[str, float]],
                   new: Sequence[str], cap: int) -> list[tuple[str, float]]:
    """Deduplicate, rescore against the question, keep the ``cap`` best (ties keep first-seen order)."""
    texts = list(dict.fromkeys([t for t, _ in current] + list(new)))
    if not texts:
        return []
    s = np.asarray(scorer.scores(question, texts), dtype=float)
    order = np.argsort(-s, kind="stable")[:cap]
    return [(texts[i], float(s[i])) for i in order]


def prune(graph: ContextGraph, llm: LlmBackend, scorer: SimilarityScorer, state: BeamState,
          candidates: Sequence[Candidate], params: QaParams, trace: list | None = None) -> BeamState:
    if not candidates:
        return replace(state, stalled=True)
    # stage 1: attach context sentences
    cands = [replace(c, hop=replace(c.hop, context=context_sentences(graph, scorer, c.hop, params.gamma)))
             for c in candidates]
    # stage 2: keep M per query
    groups: dict[tuple[int, Relation], list[Candidate]] = {}
    for c in cands:
        groups.setdefault((c.path_index, c.query), []).append(c)
    survivors: list[Candidate] = []
    for (pi, rel), group in groups.items():
        if len(group) <= params.M:
            survivors += group
            continue
        bundle = render("qa.select_triples", {
            "question": state.question, "query": render_query(graph, state.paths[pi].tail, rel),
            "triples": [render_hop(graph, c.hop) for c in group], "contexts": [list(c.hop.context) for c in group],
            "width": params.M})
        try:
            reply = complete(llm, bundle, params.retries)
            survivors += [group[i - 1] for i in reply.indices[:params.M]]
        except LlmCallError as exc:
            log.info("triple selection fell back to text similarity: %s", exc)
            s = [_relevance(graph, scorer, state.question, c.hop) for c in group]
            survivors += [group[i] for i in np.argsort(-np.asarray(s), kind="stable")[:params.M]]
    # stage 3: global top-M by relevance
    rel = np.array([_relevance(graph, scorer, state.question, c.hop) for c in survivors])
    best = [survivors[i] for i in np.argsort(-rel, kind="stable")[:params.M]]
    paths = [state.paths[c.path_index].extend(c.hop) for c in best]
    new_ctx = [s for c in best for s in c.hop.context]
    context = merge_contexts(scorer, state.question, state.context_list, new_ctx, params.N)
    out = replace(state, paths=paths, context_list=context, iteration=state.iteration + 1, stalled=False)
    if trace is not None:
        trace.append({"event": "prune", "candidates": len(cands), "after_query_selection": len(survivors),
                      **_snapshot(graph, out)})
    return out


@dataclass(frozen=True)
class Verdict:
    sufficient: bool
    answers: tuple[str, ...] = ()


def reason(graph: ContextGraph, llm: LlmBackend, state: BeamState, params: QaParams, forced: bool = False,
           trace: list | None = None) -> Verdict:
    slots = {"question": state.question, "paths": [render_path(graph, p) for p in state.paths],
             "contexts": [t for t, _ in state.context_list]}
    bundle = render("qa.forced" if forced else "qa.reason", slots, vocabulary=graph.surface_keys())
    try:
        reply = complete(llm, bundle, params.retries)
        verdict = Verdict(True, reply.items) if forced else Verdict(bool(reply.sufficient), reply.items)
        raw = reply.raw
    except LlmCallError as exc:
        log.info("reasoning reply unusable, treated as insufficient: %s", exc)
        verdict, raw = Verdict(False), exc.raw
    if trace is not None:
        trace.append({"event": "forced" if forced else "reason", "iteration": state.iteration,
                      "prompt": fingerprint(bundle.text), "raw": raw, "sufficient": verdict.sufficient,
                      "answers": list(verdict.answers)})
    return verdict


def answer_question(graph: ContextGraph, llm: LlmBackend, scorer: SimilarityScorer | None, question: str,
                    params: QaParams = QaParams(), topic_entities: Sequence[str] | None = None) -> QaResult:
    """Run the loop for one question; always halts within ``D_max`` iterations plus one forced answer."""
    graph.freeze()
    scorer = scorer or LexicalScorer()
    trace: list[dict] = [{"event": "question", "question": question}]
    if topic_entities:
        topics = [e for e in dict.fromkeys(topic_entities) if graph.has_entity(e)]
        if not topics:
            raise NoTopicEntityError(f"none of the given topic entities is in the graph: {list(topic_entities)!r}")
        trace.append({"event": "topics", "entities": topics, "given": True})
    else:
        topics = identify_topic_entities(llm, graph, question, params.max_topics, params.retries, trace)
    state = BeamState(question, topics, [ReasoningPath(e) for e in topics[:params.M]])
    check_state(state, params)
    verdict = Verdict(False)
    while state.iteration < params.D_max:
        cands = explore(graph, llm, scorer, state, params, trace)
        state = prune(graph, llm, scorer, state, cands, params, trace)
        check_state(state, params)
        if state.stalled:
            trace.append({"event": "stall", **_snapshot(graph, state)})
            break
        verdict = reason(graph, llm, state, params, trace=trace)
        if verdict.sufficient:
            break
    forced = not verdict.sufficient
    if forced:
        verdict = reason(graph, llm, state, params, forced=True, trace=trace)
    answers = list(verdict.answers)
    entities = [graph.resolve_entity(a) for a in answers]
    trace.append({"event": "answer", "answers": answers, "entities": entities, "iterations": state.iteration,
                  "forced": forced})
    return QaResult(question, answers, entities, state.iteration, forced, trace)


# ---------------------------------------------------------------- datasets

@dataclass(frozen=True)
class QaItem:
    question: str
    answers: tuple[str, ...]
    topic_entities: tuple[str, ...] = ()


def load_qa_dataset(path) -> list[QaItem]:
    items = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                items.append(QaItem(rec["question"], tuple(rec["answers"]), tuple(rec.get("topic_entities") or ())))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad QA record ({exc})") from None
    return items


def answer_all(graph: ContextGraph, llm: LlmBackend, scorer: SimilarityScorer | None, items: Sequence[QaItem],
               params: QaParams = QaParams()) -> list[QaResult]:
    """Results in input order; a question that cannot be anchored yields an empty forced answer."""
    graph.freeze()
    scorer = scorer or LexicalScorer()

    def one(item: QaItem) -> QaResult:
        try:
            return answer_question(graph, llm, scorer, item.question, params, item.topic_entities or None)
        except NoTopicEntityError as exc:
            return QaResult(item.question, [], [], 0, True, [{"event": "error", "error": str(exc)}])

    if params.workers == 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(params.workers) as pool:
        return list(pool.map(one, items))
