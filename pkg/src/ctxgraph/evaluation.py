"""Filtered link-prediction metrics, exact match for QA, long-tail buckets."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import SPLITS, ContextGraph, Relation, normalize_surface
from .kge import kernels
from .kge.models import KgeModel
from .ranking import RankedList

HITS_AT = (1, 3, 10)
N_BUCKETS = 5


@dataclass(frozen=True)
class EvalQuery:
    """A tail query ``(known, relation, ?)``; head queries use the reversed relation."""

    known: str
    relation: Relation
    answer: str
    direction: str  # "tail" if the original triple's tail is asked, else "head"

    @property
    def triple(self) -> tuple[str, str, str]:
        if self.direction == "tail":
            return (self.known, self.relation.raw, self.answer)
        return (self.answer, self.relation.raw, self.known)


def evaluation_queries(graph: ContextGraph, split: str = "test") -> list[EvalQuery]:
    """Both directions of every triple in ``split``: tail query first, then head query."""
    out = []
    for h, r, t in graph.triples(split):
        out.append(EvalQuery(h, r, t, "tail"))
        out.append(EvalQuery(t, r.inverse(), h, "head"))
    return out


class FilterIndex:
    """Known true answers per ``(known, relation)`` over train, valid and test."""

    def __init__(self, graph: ContextGraph, splits: Sequence[str] = SPLITS):
        graph.freeze()
        self.graph = graph
        answers: dict[tuple[int, int], set[int]] = {}
        for split in splits:
            for h, r, t in graph.split_array(split):
                answers.setdefault((int(h), int(r)), set()).add(int(t))
                answers.setdefault((int(t), int(r) + 1), set()).add(int(h))
        self._answers = {k: np.array(sorted(v), dtype=np.int64) for k, v in answers.items()}
        self._empty = np.zeros(0, dtype=np.int64)

    def members(self, known: str, relation: Relation) -> np.ndarray:
        key = (self.graph.entity_index(known), self.graph.relation_index(relation))
        return self._answers.get(key, self._empty)

    def answers(self, known: str, relation: Relation) -> frozenset[str]:
        return frozenset(self.graph.entity_ids[i] for i in self.members(known, relation))

    def csr(self, queries: Sequence[EvalQuery]) -> tuple[np.ndarray, np.ndarray]:
        parts = [self.members(q.known, q.relation) for q in queries]
        offsets = np.zeros(len(parts) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(p) for p in parts])
        members = np.concatenate(parts) if parts else self._empty
        return offsets, members.astype(np.int64)


class MissingAnswerError(ValueError):
    pass


def filtered_rank(final: RankedList, query: EvalQuery, filt: FilterIndex) -> int:
    """1-based rank of the answer after removing every other known answer from ``final``."""
    g = filt.graph.entity_index(query.answer)
    try:
        pos = final.position(g)
    except ValueError:
        raise MissingAnswerError(f"answer {query.answer!r} missing from ranked list") from None
    ahead = final.order[:pos]
    others = filt.members(query.known, query.relation)
    return int(pos - np.isin(ahead, others).sum() + 1)


def score_ranks(scores: np.ndarray, gold: np.ndarray, offsets: np.ndarray, members: np.ndarray) -> np.ndarray:
    """Filtered ranks straight from a (Q, n) score matrix, ties to the lower index."""
    return kernels.filtered_ranks(np.ascontiguousarray(scores, dtype=np.float64), np.ascontiguousarray(gold),
                                  offsets, members)


def model_ranks(model: KgeModel, queries: Sequence[EvalQuery], filt: FilterIndex, batch_size: int = 256) -> np.ndarray:
    """Filtered ranks of a model on tail-form queries, without materialising ranked lists."""
    graph = filt.graph
    out = np.empty(len(queries), dtype=np.int64)
    for a in range(0, len(queries), batch_size):
        chunk = queries[a:a + batch_size]
        h = np.array([model.entity_index(q.known) for q in chunk])
        r = np.array([model.relation_index(q.relation) for q in chunk])
        gold = np.array([graph.entity_index(q.answer) for q in chunk], dtype=np.int64)
        offsets, members = filt.csr(chunk)
        out[a:a + len(chunk)] = score_ranks(model.tail_scores(h, r), gold, offsets, members)
    return out


@dataclass
class Bucket:
    low: float
    high: float
    count: int
    hits1: float | None
    mrr: float | None


@dataclass
class MetricReport:
    count: int
    mrr: float
    hits: dict[int, float]
    ranks: list[int] = field(repr=False)
    bucket_edges: list[float] = field(default_factory=list)
    buckets: list[Bucket] = field(default_factory=list)

    def to_dict(self, include_ranks: bool = False) -> dict:
        d = {
            "count": self.count,
            "mrr": self.mrr,
            "hits": {str(k): v for k, v in self.hits.items()},
            "long_tail": {"edges_log10_degree_plus_1": self.bucket_edges,
                          "buckets": [asdict(b) for b in self.buckets]},
        }
        if include_ranks:
            d["ranks"] = list(self.ranks)
        return d


def long_tail_buckets(ranks: np.ndarray, degrees: np.ndarray, n_buckets: int = N_BUCKETS) -> tuple[list[float], list[Bucket]]:
    """Equal-width bins over ``log10(degree + 1)``; the last bin is closed on the right."""
    x = np.log10(np.asarray(degrees, dtype=float) + 1.0)
    lo, hi = float(x.min()), float(x.max())
    edges = np.linspace(lo, hi, n_buckets + 1)
    which = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_buckets - 1)
    buckets = []
    for b in range(n_buckets):
        sel = ranks[which == b]
        buckets.append(Bucket(float(edges[b]), float(edges[b + 1]), int(sel.size),
                              float((sel <= 1).mean()) if sel.size else None,
                              float((1.0 / sel).mean()) if sel.size else None))
    return [float(e) for e in edges], buckets


def aggregate(ranks: Iterable[int], degrees: Iterable[int] | None = None) -> MetricReport:
    r = np.asarray(list(ranks), dtype=np.int64)
    if r.size == 0:
        raise ValueError("no ranks to aggregate")
    if (r < 1).any():
        raise ValueError("ranks are 1-based")
    report = MetricReport(
        count=int(r.size),
        mrr=float(np.mean(1.0 / r)),
        hits={k: float(np.mean(r <= k)) for k in HITS_AT},
        ranks=r.tolist(),
    )
    if degrees is not None:
        d = np.asarray(list(degrees))
        if d.shape != r.shape:
            raise ValueError("one degree per rank required")
        report.bucket_edges, report.buckets = long_tail_buckets(r, d)
    return report


def query_degrees(graph: ContextGraph, queries: Sequence[EvalQuery]) -> np.ndarray:
    return np.array([graph.degree[graph.entity_index(q.known)] for q in queries], dtype=np.int64)


def write_report(report: MetricReport, queries: Sequence[EvalQuery], out_dir, extra: dict | None = None) -> tuple[Path, Path]:
    """``metrics.json`` plus a flat ``ranks.tsv`` (one row per query)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    jpath = out / "metrics.json"
    jpath.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tpath = out / "ranks.tsv"
    with tpath.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["head", "relation", "tail", "direction", "rank"])
        for q, rank in zip(queries, report.ranks):
            w.writerow([*q.triple, q.direction, rank])
    return jpath, tpath


def exact_match(predicted: Sequence[str], gold: Sequence[str], graph: ContextGraph | None = None) -> int:
    """1 if any prediction equals any gold answer after normalisation, else 0.

    With a graph, strings that resolve to an entity compare by entity id, so
    aliases match their label.
    """
    if not gold:
        raise ValueError("gold answers must be non-empty")

    def keys(text: str) -> set[str]:
        k = {normalize_surface(text)}
        if graph is not None:
            e = graph.resolve_entity(text)
            if e is not None:
                k.add("\x00" + e)
        return k

    gold_keys = set().union(*(keys(g) for g in gold))
    return int(any(keys(p) & gold_keys for p in predicted if normalize_surface(p)))


def em_score(results: Iterable[tuple[Sequence[str], Sequence[str]]], graph: ContextGraph | None = None) -> float:
    vals = [exact_match(p, g, graph) for p, g in results]
    return float(np.mean(vals)) if vals else math.nan
