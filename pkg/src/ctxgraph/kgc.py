"""Knowledge-graph completion: retrieve candidates, let a language model rank them.

For a query ``(known, r, ?)`` (head queries are answered through ``r^-1``):

1. an embedding model ranks every entity (``A_KGE``);
2. the model reads the known entity's paragraph and proposes answers, which
   are kept only if they resolve to entities inside the top ``delta`` of
   ``A_KGE`` (``A_LLM``);
3. the candidate set ``C`` is the top ``n`` of ``A_KGE`` followed by the
   ``A_LLM`` members not already there;
4. the model reorders ``C`` (``A_RR``) and the final ranking is ``A_RR``
   followed by the rest of ``A_KGE`` in its original order.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import EvalQuery, FilterIndex, MetricReport, aggregate, evaluation_queries, filtered_rank
from .graph import ContextGraph, Quadruple, Relation, normalize_surface
from .kge.models import KgeModel
from .llm import LlmBackend, LlmCallError, complete, fingerprint, render
from .llm.templates import ORDER_PREFIX, bracket_list
from .ranking import RankedList
from .textsim import LexicalScorer, SimilarityScorer

log = logging.getLogger(__name__)

LORA_METADATA = {"rank": 16, "alpha": 32, "learning_rate": 1.0e-4}
SFT_SYSTEM_PROMPT = "You are a knowledge graph completion assistant. Rank candidate answers by plausibility."


@dataclass(frozen=True)
class KgcParams:
    k: int = 4
    n: int = 20
    delta: int = 50
    gamma: int = 3
    demos: int = 2
    m_cap: int | None = None
    retries: int = 2
    reasoning: bool = True
    contextual: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.k < 0 or self.demos < 0 or self.retries < 0:
            raise ValueError("k, demos and retries must be >= 0")
        if self.n < 1 or self.delta < 1 or self.gamma < 1 or self.workers < 1:
            raise ValueError("n, delta, gamma and workers must be >= 1")
        if self.m_cap is not None and self.m_cap < 0:
            raise ValueError("m_cap must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class KgcQuery:
    """``missing`` names the masked side; ``relation`` is always a forward relation."""

    known: str
    relation: Relation
    missing: str = "tail"
    ground_truth: str | None = None

    def __post_init__(self):
        if self.missing not in ("head", "tail"):
            raise ValueError("missing must be 'head' or 'tail'")
        if self.relation.reversed:
            raise ValueError("pass the forward relation and set missing='head' instead")

    @property
    def tail_relation(self) -> Relation:
        """The relation under which the query becomes ``(known, r', ?)``."""
        return self.relation if self.missing == "tail" else self.relation.inverse()

    @classmethod
    def from_eval(cls, q: EvalQuery) -> "KgcQuery":
        if q.direction == "tail":
            return cls(q.known, q.relation, "tail", q.answer)
        return cls(q.known, q.relation.inverse(), "head", q.answer)

    def to_eval(self) -> EvalQuery:
        if self.ground_truth is None:
            raise ValueError("query has no ground truth")
        return EvalQuery(self.known, self.tail_relation, self.ground_truth, self.missing)


@dataclass(frozen=True)
class CandidateSet:
    a_kge: tuple[str, ...]  # top-delta prefix is enough for every rule here
    a_llm: tuple[str, ...]
    composed: tuple[str, ...]
    n: int


# ---------------------------------------------------------------- retrieval

class RelationRows:
    """Train views (reversed included) grouped by relation index."""

    def __init__(self, graph: ContextGraph):
        train = graph.split_array("train")
        views = np.concatenate([train, train[:, [2, 1, 0]] + np.array([0, 1, 0])])
        order = np.lexsort((views[:, 2], views[:, 0], views[:, 1]))
        self.rows = views[order]
        self.offsets = np.searchsorted(self.rows[:, 1], np.arange(graph.num_relations + 1))

    def of(self, r: int) -> np.ndarray:
        return self.rows[self.offsets[r]:self.offsets[r + 1]]


def _entity_text(graph: ContextGraph, e: str) -> str:
    desc = graph.description_of(e)
    return f"{graph.label_of(e)} {desc}" if desc else graph.label_of(e)


def retrieve_supporting_triples(graph: ContextGraph, query: KgcQuery, k: int,
                                scorer: SimilarityScorer | None = None,
                                rows: RelationRows | None = None) -> list[Quadruple]:
    """Up to ``k`` train triples (as tail-form views) illustrating the query relation.

    Tier 1: same known entity and relation, in view order. Tier 2: same
    relation with another known entity, entities ranked by text similarity of
    label plus description to the query's known entity (ties by id), each
    contributing its views in order. The query triple itself is never returned.
    """
    if k <= 0:
        return []
    rows = rows or RelationRows(graph)
    ri = graph.relation_index(query.tail_relation)
    ki = graph.entity_index(query.known)
    gi = graph.entity_index(query.ground_truth) if query.ground_truth and graph.has_entity(query.ground_truth) else -1
    cand = rows.of(ri)
    cand = cand[~((cand[:, 0] == ki) & (cand[:, 2] == gi))]
    tier1 = cand[cand[:, 0] == ki]
    picked = list(tier1[:k])
    if len(picked) < k:
        rest = cand[cand[:, 0] != ki]
        heads = np.unique(rest[:, 0])
        if heads.size:
            scorer = scorer or LexicalScorer()
            texts = [_entity_text(graph, graph.entity_ids[h]) for h in heads]
            s = np.asarray(scorer.scores(_entity_text(graph, query.known), texts), dtype=float)
            for h in heads[np.argsort(-s, kind="stable")]:
                for row in rest[rest[:, 0] == h]:
                    picked.append(row)
                    if len(picked) == k:
                        break
                if len(picked) == k:
                    break
    return [graph.view(row) for row in picked]


def retrieve_candidates_kge(model: KgeModel, query: KgcQuery) -> RankedList:
    return model.rank_all(query.known, query.tail_relation, "tail")


def _prompt_slots(graph: ContextGraph, query: KgcQuery) -> dict:
    return {"known": graph.label_of(query.known), "relation": query.relation.raw, "missing": query.missing}


def retrieve_candidates_text(graph: ContextGraph, query: KgcQuery, llm: LlmBackend, a_kge: Sequence[str],
                             delta: int, retries: int = 2, m_cap: int | None = None,
                             events: list | None = None) -> list[str]:
    """``A_LLM``: answers proposed from the known entity's paragraph, resolved and top-``delta`` filtered."""
    ctx = graph.entity_contexts.get(query.known)
    if ctx is None:
        return []
    slots = _prompt_slots(graph, query)
    slots["paragraph"] = ctx.wiki_paragraph or ""
    bundle = render("kgc.reasoning.contextual", slots, vocabulary=graph.surface_keys())
    try:
        reply = complete(llm, bundle, retries)
    except LlmCallError as exc:
        log.warning("reasoning failed for %s: %s", query, exc)
        if events is not None:
            events.append({"stage": "reasoning", "template": bundle.template_id, "error": str(exc), "raw": exc.raw})
        return []
    allowed = set(a_kge[:delta])
    out, unresolved, outside = [], [], []
    for item in reply.items:
        e = graph.resolve_entity(item)
        if e is None:
            unresolved.append(item)
        elif e not in allowed:
            outside.append(item)
        elif e not in out:
            out.append(e)
    if m_cap is not None:
        out = out[:m_cap]
    if events is not None:
        events.append({"stage": "reasoning", "template": bundle.template_id, "prompt": fingerprint(bundle.text),
                       "raw": reply.raw,
                       "parsed": list(reply.items), "unresolved": unresolved, "outside_delta": outside,
                       "a_llm": out})
    return out


# ---------------------------------------------------------------- ranking

def compose_candidates(a_kge: Sequence[str], a_llm: Sequence[str], n: int) -> CandidateSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    top = list(a_kge[:n])
    seen = set(top)
    composed = list(top)
    for e in a_llm:
        if e not in seen:
            seen.add(e)
            composed.append(e)
    return CandidateSet(tuple(a_kge), tuple(a_llm), tuple(composed), n)


def reconcile_order(parsed: Sequence[str], candidates: Sequence[str], labels: Sequence[str]) -> list[str]:
    """Map a parsed label order back onto ``candidates``.

    Unknown labels and repeats are dropped; candidates the reply left out are
    appended in their prior order. Shared labels are consumed left to right.
    """
    pool: dict[str, list[str]] = {}
    for e, lab in zip(candidates, labels):
        pool.setdefault(normalize_surface(lab), []).append(e)
    order = []
    for item in parsed:
        bucket = pool.get(normalize_surface(item))
        if bucket:
            order.append(bucket.pop(0))
    placed = set(order)
    return order + [e for e in candidates if e not in placed]


def rerank(llm: LlmBackend, graph: ContextGraph, query: KgcQuery, candidates: CandidateSet,
           contextual: bool = True, retries: int = 2, preamble: Sequence[str] = (),
           events: list | None = None) -> list[str]:
    """``A_RR``: the model's order of ``C``; falls back to ``C`` order on failure."""
    c = list(candidates.composed)
    if len(c) <= 1:
        return c
    labels = [graph.label_of(e) for e in c]
    slots = _prompt_slots(graph, query)
    slots["candidates"] = labels
    if contextual:
        slots["candidate_descriptions"] = [graph.description_of(e) for e in c]
        slots["known_description"] = graph.description_of(query.known)
    bundle = render("kgc.ranking.contextual" if contextual else "kgc.ranking", slots).with_preamble(preamble)
    try:
        reply = complete(llm, bundle, retries)
    except LlmCallError as exc:
        log.warning("re-ranking failed for %s: %s", query, exc)
        if events is not None:
            events.append({"stage": "rerank", "template": bundle.template_id, "error": str(exc), "raw": exc.raw})
        return c
    order = reconcile_order(reply.items, c, labels)
    if events is not None:
        events.append({"stage": "rerank", "template": bundle.template_id, "prompt": fingerprint(bundle.text),
                       "raw": reply.raw,
                       "parsed": list(reply.items), "a_rr": order})
    return order


def assemble_final(a_rr: Sequence[str], a_kge: RankedList, composed: Sequence[str]) -> RankedList:
    """``A_RR`` followed by ``A_KGE`` without the members of ``C``."""
    if sorted(a_rr) != sorted(composed) or len(set(a_rr)) != len(a_rr):
        raise ValueError("re-ranked list must be a permutation of the candidate set")
    index = {e: i for i, e in enumerate(a_kge.vocab)}
    head = np.array([index[e] for e in a_rr], dtype=np.int64)
    keep = ~np.isin(a_kge.order, head)
    return RankedList(np.concatenate([head, a_kge.order[keep]]), a_kge.vocab)


# ---------------------------------------------------------------- pipeline

@dataclass
class KgcOutcome:
    query: KgcQuery
    supporting: list[tuple[str, str, str]]
    a_llm: list[str]
    composed: list[str]
    a_rr: list[str]
    final: RankedList = field(repr=False)
    kge_rank: int | None = None
    rank: int | None = None
    events: list = field(default_factory=list, repr=False)

    def to_record(self) -> dict:
        q = self.query
        return {
            "known": q.known, "relation": q.relation.raw, "missing": q.missing, "ground_truth": q.ground_truth,
            "supporting": [list(t) for t in self.supporting], "a_llm": self.a_llm, "composed": self.composed,
            "a_rr": self.a_rr, "kge_rank": self.kge_rank, "rank": self.rank, "events": self.events,
        }


class KgcPipeline:
    """Runs the retrieve-and-rank flow for individual queries or a whole split."""

    def __init__(self, graph: ContextGraph, model: KgeModel, llm: LlmBackend, params: KgcParams = KgcParams(),
                 scorer: SimilarityScorer | None = None):
        graph.freeze()
        if model.vocab_hash() != graph.vocab_hash():
            raise ValueError("model vocabulary does not match the graph")
        self.graph = graph
        self.model = model
        self.llm = llm
        self.params = params
        self.scorer = scorer or LexicalScorer()
        self.rows = RelationRows(graph)
        self._filter: FilterIndex | None = None

    @property
    def filter(self) -> FilterIndex:
        if self._filter is None:
            self._filter = FilterIndex(self.graph)
        return self._filter

    def demonstration_preamble(self, query: KgcQuery, supporting: Sequence[Quadruple], a_kge_top: Sequence[str]) -> str:
        g, p = self.graph, self.params
        demos = []
        for quad in supporting[:p.demos]:
            demos.append({"known": g.label_of(quad.h), "answer": g.label_of(quad.t),
                          "known_description": g.description_of(quad.h),
                          "answer_description": g.description_of(quad.t)})
        slots = _prompt_slots(g, query)
        slots.update(demos=demos, candidates=[g.label_of(e) for e in a_kge_top],
                     candidate_descriptions=[g.description_of(e) for e in a_kge_top])
        return render("kgc.retrieval.contextual" if p.contextual else "kgc.retrieval", slots).text

    def run_query(self, query: KgcQuery) -> KgcOutcome:
        p, g = self.params, self.graph
        events: list = []
        supporting = retrieve_supporting_triples(g, query, p.k, self.scorer, self.rows)
        a_kge = retrieve_candidates_kge(self.model, query)
        kge_top = a_kge.top(max(p.n, p.delta))
        a_llm = []
        if p.reasoning:
            a_llm = retrieve_candidates_text(g, query, self.llm, kge_top, p.delta, p.retries, p.m_cap, events)
        cset = compose_candidates(kge_top, a_llm, p.n)
        preamble = (self.demonstration_preamble(query, supporting, kge_top[:p.n]),) if p.demos and supporting else ()
        a_rr = rerank(self.llm, g, query, cset, p.contextual, p.retries, preamble, events)
        final = assemble_final(a_rr, a_kge, cset.composed)
        out = KgcOutcome(query, [(q.h, str(q.r), q.t) for q in supporting], a_llm, list(cset.composed), a_rr,
                         final, events=events)
        if query.ground_truth is not None:
            eq = query.to_eval()
            out.kge_rank = filtered_rank(a_kge, eq, self.filter)
            out.rank = filtered_rank(final, eq, self.filter)
        return out

    def run(self, queries: Sequence[KgcQuery]) -> list[KgcOutcome]:
        """Outcomes in query order regardless of worker scheduling."""
        if self.params.workers == 1:
            return [self.run_query(q) for q in queries]
        with ThreadPoolExecutor(self.params.workers) as pool:
            return list(pool.map(self.run_query, queries))

    def evaluate(self, split: str = "test", limit: int | None = None) -> tuple[MetricReport, MetricReport, list[KgcOutcome]]:
        """Filtered metrics of the pipeline and of the embedding model alone, both directions per triple."""
        queries = [KgcQuery.from_eval(q) for q in evaluation_queries(self.graph, split)[:limit]]
        outcomes = self.run(queries)
        degrees = [int(self.graph.degree[self.graph.entity_index(q.known)]) for q in queries]
        final = aggregate([o.rank for o in outcomes], degrees)
        base = aggregate([o.kge_rank for o in outcomes], degrees)
        return final, base, outcomes


# ---------------------------------------------------------------- SFT export

def export_sft_dataset(graph: ContextGraph, model: KgeModel, n: int, out_path, seed: int = 0,
                       split: str = "valid", limit: int | None = None) -> int:
    """Write chat-format re-ranking samples built from ``split``; returns the sample count.

    Each triple yields a tail and a head sample. Candidates are the top ``n``
    of the embedding ranking with the ground truth moved to the front; the
    prompt shows them shuffled and the target restores that order.
    A ``<out>.meta.json`` sidecar records the export and fine-tuning settings.
    """
    graph.freeze()
    if n < 1:
        raise ValueError("n must be >= 1")
    triples = evaluation_queries(graph, split)[:limit]
    if not triples:
        raise ValueError(f"{split} split is empty")
    rng = np.random.default_rng(seed)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with out_path.open("w", encoding="utf-8", newline="\n") as fh:
        for eq in triples:
            query = KgcQuery.from_eval(eq)
            gt = eq.answer
            target = [gt] + [e for e in retrieve_candidates_kge(model, query).top(n) if e != gt]
            shown = [target[i] for i in rng.permutation(len(target))]
            slots = _prompt_slots(graph, query)
            slots.update(candidates=[graph.label_of(e) for e in shown],
                         candidate_descriptions=[graph.description_of(e) for e in shown],
                         known_description=graph.description_of(query.known))
            prompt = render("kgc.ranking.contextual", slots).text
            rec = {
                "messages": [{"role": "system", "content": SFT_SYSTEM_PROMPT}, {"role": "user", "content": prompt}],
                "assistant": f"{ORDER_PREFIX} {bracket_list([graph.label_of(e) for e in target])}",
                "meta": {"triple": list(eq.triple), "missing": query.missing, "candidates": shown,
                         "ground_truth": gt, "target": target},
            }
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
            count += 1
    meta = {"samples": count, "n": n, "seed": seed, "split": split, "vocab_hash": graph.vocab_hash(),
            "model_kind": model.kind, "lora": LORA_METADATA}
    Path(str(out_path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return count
