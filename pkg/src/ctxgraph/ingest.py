"""Attach entity and relation contexts to a bare triple graph.

Entity contexts come from an offline dump (JSON lines keyed by external id)
or from a small-batch HTTP fetcher; relation contexts are the ``gamma``
sentences of the two endpoint paragraphs that best match the verbalised
triple.
"""
from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from ._http import TokenBucket, api_key_headers
from .graph import ContextGraph, EntityContext, GraphError, Relation, RelationContext
from .textsim import LexicalScorer, SimilarityScorer

log = logging.getLogger(__name__)


class MappingTable(dict):
    """native entity id -> external id (e.g. Wikidata QID); injective."""

    def __setitem__(self, key, value):
        for other, v in self.items():
            if v == value and other != key:
                raise ValueError(f"external id {value!r} mapped from both {other!r} and {key!r}")
        super().__setitem__(key, value)

    @classmethod
    def load(cls, path) -> "MappingTable":
        table = cls()
        reverse: dict[str, str] = {}
        with Path(path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\r\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise GraphError(f"{path}:{lineno}: expected 'native_id<TAB>external_id'")
                native, ext = parts[0].strip(), parts[1].strip()
                if ext in reverse and reverse[ext] != native:
                    raise ValueError(f"{path}:{lineno}: {ext!r} already mapped from {reverse[ext]!r}")
                reverse[ext] = native
                dict.__setitem__(table, native, ext)
        return table


@dataclass(frozen=True)
class FetchPolicy:
    max_requests_per_second: float = 1.0
    max_retries: int = 3
    timeout: float = 10.0

    def __post_init__(self):
        if self.max_requests_per_second <= 0 or self.max_retries <= 0 or self.timeout <= 0:
            raise ValueError("fetch policy values must all be positive")


@dataclass
class CoverageReport:
    total: int = 0
    mapped: int = 0
    fetched: int = 0
    failed: list[str] = field(default_factory=list)

    @property
    def coverage(self) -> float:
        return self.fetched / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {"total": self.total, "mapped": self.mapped, "fetched": self.fetched,
                "failed": list(self.failed), "coverage": self.coverage}


class FetchError(RuntimeError):
    pass


class EntitySource(Protocol):
    def fetch(self, external_ids: Sequence[str]) -> dict[str, dict]: ...


def normalize_record(rec: Mapping, lang: str = "en") -> dict:
    """Flatten either our dump layout or a Wikidata ``wbgetentities`` entity."""
    if "labels" in rec:  # Wikidata JSON
        label = rec.get("labels", {}).get(lang, {}).get("value", "")
        desc = rec.get("descriptions", {}).get(lang, {}).get("value", "")
        aliases = [a["value"] for a in rec.get("aliases", {}).get(lang, [])]
        return {"label": label, "description": desc, "aliases": aliases,
                "wiki_paragraph": rec.get("wiki_paragraph")}
    return {
        "label": rec.get("label", ""),
        "description": rec.get("description") or "",
        "aliases": list(rec.get("aliases") or []),
        "wiki_paragraph": rec.get("wiki_paragraph"),
    }


class DumpSource:
    """Offline dump: JSON lines, each with an ``id`` (or ``external_id``) key."""

    def __init__(self, path):
        self.path = Path(path)
        self._records: dict[str, dict] = {}
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                key = rec.get("id") or rec.get("external_id")
                if not key:
                    raise GraphError(f"{path}:{lineno}: dump record without 'id'")
                self._records[key] = rec

    def fetch(self, external_ids: Sequence[str]) -> dict[str, dict]:
        return {q: self._records[q] for q in external_ids if q in self._records}


class RemoteEntitySource:
    """Rate-limited batch fetcher against a read-only entity endpoint.

    Sends ``GET endpoint?ids=Q1|Q2`` and accepts ``{"entities": {id: record}}``
    (Wikidata style) or a plain ``{id: record}`` object. The API key, if any,
    is read from ``api_key_env``.
    """

    def __init__(self, endpoint: str, policy: FetchPolicy = FetchPolicy(),
                 api_key_env: str | None = "CTXGRAPH_ENTITY_API_KEY", batch_size: int = 50,
                 client=None, sleep=time.sleep):
        import httpx

        self.endpoint = endpoint
        self.policy = policy
        self.api_key_env = api_key_env
        self.batch_size = batch_size
        self._client = client or httpx.Client(timeout=policy.timeout)
        self._bucket = TokenBucket(policy.max_requests_per_second, burst=1, sleep=sleep)
        self._sleep = sleep

    def _fetch_batch(self, ids: Sequence[str]) -> dict[str, dict]:
        last = None
        for attempt in range(self.policy.max_retries):
            self._bucket.acquire()
            try:
                resp = self._client.get(self.endpoint, params={"ids": "|".join(ids)},
                                        headers=api_key_headers(self.api_key_env))
                resp.raise_for_status()
                body = resp.json()
                return body.get("entities", body) if isinstance(body, dict) else {}
            except Exception as exc:  # transport, HTTP status or JSON errors
                last = exc
                log.debug("fetch attempt %d for %d ids failed: %s", attempt + 1, len(ids), exc)
                self._sleep(min(2.0 ** attempt * 0.1, 5.0))
        raise FetchError(f"giving up after {self.policy.max_retries} attempts: {last}")

    def fetch(self, external_ids: Sequence[str]) -> dict[str, dict]:
        out: dict[str, dict] = {}
        ids = list(external_ids)
        for start in range(0, len(ids), self.batch_size):
            batch = ids[start:start + self.batch_size]
            try:
                out.update({k: v for k, v in self._fetch_batch(batch).items() if "missing" not in v})
            except FetchError as exc:
                log.warning("%s", exc)
        return out


def attach_entity_contexts(graph: ContextGraph, source: EntitySource,
                           mapping: Mapping[str, str]) -> CoverageReport:
    """Give every entity an :class:`EntityContext`.

    Mapped entities found in ``source`` get label/description/aliases and the
    paragraph when present. Everything else receives a minimal context whose
    label is the native id. Mapped-but-missing entities land in ``failed``.
    """
    graph.freeze()
    report = CoverageReport(total=graph.num_entities)
    wanted = {e: mapping[e] for e in graph.entity_ids if e in mapping}
    report.mapped = len(wanted)
    records = source.fetch(sorted(set(wanted.values())))
    for e in graph.entity_ids:
        ext = wanted.get(e)
        rec = records.get(ext) if ext else None
        ctx = None
        if rec is not None:
            flat = normalize_record(rec)
            if flat["label"]:
                ctx = EntityContext(flat["label"], flat["description"], tuple(flat["aliases"]),
                                    flat["wiki_paragraph"] or None, ext)
        if ctx is not None:
            report.fetched += 1
        else:
            if ext:
                report.failed.append(e)
            ctx = EntityContext(label=e, external_id=ext)
        graph.set_entity_context(e, ctx)
    return report


# --------------------------------------------------------------- sentences

_ABBREVIATIONS = frozenset("""
mr mrs ms dr prof st jr sr vs etc inc ltd co corp no mt ft gen col lt sgt capt rev hon est approx
dept univ fig jan feb mar apr jun jul aug sep sept oct nov dec u.s u.k u.n e.g i.e a.m p.m d.c
""".split())
_BOUNDARY = re.compile(r"[.!?]+[\"'”’)\]]*(?=\s)")
_OPEN_QUOTES = "\"'“‘"


def _is_abbreviation(segment: str) -> bool:
    m = re.search(r"(\S+)$", segment)
    if not m:
        return False
    word = m.group(1).lstrip("(\"'").rstrip(".").lower()
    return word in _ABBREVIATIONS or (len(word) == 1 and word.isalpha())


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """Character spans of sentences; every span is a stripped slice of ``text``."""
    spans = []

    def emit(a: int, b: int):
        while a < b and text[a].isspace():
            a += 1
        while b > a and text[b - 1].isspace():
            b -= 1
        if a < b:
            spans.append((a, b))

    for block in re.finditer(r"[^\n]+", text):
        start = block.start()
        for m in _BOUNDARY.finditer(text, block.start(), block.end()):
            nxt = m.end()
            while nxt < block.end() and text[nxt].isspace():
                nxt += 1
            if nxt >= block.end():
                continue
            ch = text[nxt]
            if not (ch.isupper() or ch in _OPEN_QUOTES):
                continue
            if text[m.start()] == "." and _is_abbreviation(text[start:m.start()]):
                continue
            emit(start, m.end())
            start = m.end()
        emit(start, block.end())
    return spans


def split_sentences(text: str) -> list[str]:
    return [text[a:b] for a, b in sentence_spans(text)]


def relation_words(raw: str) -> str:
    """``/location/adjoining_relationship/adjoins`` -> ``location adjoining relationship adjoins``."""
    parts = [p for p in re.split(r"[/.]+", raw) if p]
    return " ".join(p.replace("_", " ") for p in parts)


def verbalize_triple(graph: ContextGraph, h: str, r: Relation | str, t: str) -> str:
    rel = Relation.parse(r) if isinstance(r, str) else r
    words = relation_words(rel.raw)
    if rel.reversed:
        h, t = t, h
    return f"{graph.label_of(h)} {words} {graph.label_of(t)}"


def select_supporting_sentences(scorer: SimilarityScorer, query: str, sentences: Sequence[str],
                                gamma: int) -> RelationContext:
    """Top-``gamma`` sentences by score; ties keep document order."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if not sentences:
        return RelationContext()
    s = np.clip(np.asarray(scorer.scores(query, list(sentences)), dtype=float), 0.0, 1.0)
    order = np.argsort(-s, kind="stable")[:gamma]
    return RelationContext(tuple((sentences[i], float(s[i])) for i in order))


def combined_document(graph: ContextGraph, h: str, t: str) -> str | None:
    ph = (graph.entity_contexts.get(h) or None)
    pt = (graph.entity_contexts.get(t) or None)
    ph = ph.wiki_paragraph if ph else None
    pt = pt.wiki_paragraph if pt else None
    if not ph or not pt:
        return None
    return ph + "\n\n" + pt


def extract_relation_contexts(graph: ContextGraph, scorer: SimilarityScorer | None = None,
                              gamma: int = 3) -> int:
    """Attach a :class:`RelationContext` to every train triple.

    Returns the number of triples that received at least one sentence.
    Triples whose endpoints lack a paragraph get an empty context. When no
    scorer is given, a BM25 scorer is fitted on all paragraph sentences.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    graph.freeze()
    cache: dict[str, list[str]] = {}

    def sentences_of(e: str) -> list[str]:
        if e not in cache:
            ctx = graph.entity_contexts.get(e)
            cache[e] = split_sentences(ctx.wiki_paragraph) if ctx and ctx.wiki_paragraph else []
        return cache[e]

    if scorer is None:
        corpus = [s for e in graph.entity_ids for s in sentences_of(e)]
        scorer = LexicalScorer(corpus)
    filled = 0
    for h, r, t in graph.triples("train"):
        if combined_document(graph, h, t) is None:
            graph.set_relation_context(h, r, t, RelationContext())
            continue
        try:
            # splitting per paragraph equals splitting the joined document: the
            # blank-line join is always a hard boundary
            sents = sentences_of(h) + sentences_of(t)
            rc = select_supporting_sentences(scorer, verbalize_triple(graph, h, r, t), sents, gamma)
        except Exception as exc:
            log.warning("relation context for (%s, %s, %s) failed: %s", h, r, t, exc)
            rc = RelationContext()
        graph.set_relation_context(h, r, t, rc)
        filled += bool(len(rc))
    return filled
