"""In-memory context graph.

A :class:`ContextGraph` holds the entity and relation vocabularies, the
train/valid/test triples, and the textual contexts attached to entities and
triples. The graph is built by a single writer (``add_triple`` /
``load_triples``) and then frozen; freezing sorts the vocabularies so that
integer indices follow lexicographic id order, and builds the adjacency
indices every downstream stage reads.

Reversed relations (``r^-1``) are part of the relation vocabulary but
reversed triples are never stored; ``neighbors`` materialises them as views.
Relation ``i`` in sorted forward order has index ``2*i`` and its reverse
``2*i + 1``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Literal, Mapping

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
REVERSE_SUFFIX = "^-1"

Direction = Literal["out", "in", "both"]


class GraphError(Exception):
    pass


class MalformedTripleError(GraphError):
    def __init__(self, path, lineno: int, line: str):
        self.path = str(path)
        self.lineno = lineno
        self.line = line
        super().__init__(f"{path}:{lineno}: expected 'head<TAB>relation<TAB>tail', got {line!r}")


class UnknownEntityError(GraphError, KeyError):
    def __str__(self):
        return f"unknown entity: {self.args[0]!r}"


class UnknownRelationError(GraphError, KeyError):
    def __str__(self):
        return f"unknown relation: {self.args[0]!r}"


class FrozenGraphError(GraphError):
    pass


def normalize_surface(text: str) -> str:
    """Case-fold and collapse whitespace; the key used for label/alias lookup."""
    return " ".join(text.casefold().split())


@dataclass(frozen=True, order=True)
class Relation:
    raw: str
    reversed: bool = False

    def __post_init__(self):
        if not self.raw:
            raise ValueError("relation id must be non-empty")

    def inverse(self) -> "Relation":
        return Relation(self.raw, not self.reversed)

    def __str__(self) -> str:
        return self.raw + REVERSE_SUFFIX if self.reversed else self.raw

    @classmethod
    def parse(cls, text: str) -> "Relation":
        """Inverse of ``str()``: a trailing ``^-1`` marks the reversed twin."""
        if text.endswith(REVERSE_SUFFIX):
            return cls(text[: -len(REVERSE_SUFFIX)], True)
        return cls(text)


@dataclass(frozen=True)
class EntityContext:
    label: str
    description: str = ""
    aliases: tuple[str, ...] = ()
    wiki_paragraph: str | None = None
    external_id: str | None = None

    def __post_init__(self):
        if not self.label:
            raise ValueError("entity context needs a non-empty label")
        seen = {normalize_surface(self.label)}
        kept = []
        for alias in self.aliases:
            key = normalize_surface(alias)
            if key and key not in seen:
                seen.add(key)
                kept.append(alias)
        object.__setattr__(self, "aliases", tuple(kept))

    def to_record(self, entity_id: str) -> dict:
        return {
            "entity_id": entity_id,
            "label": self.label,
            "description": self.description,
            "aliases": list(self.aliases),
            "wiki_paragraph": self.wiki_paragraph,
            "external_id": self.external_id,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "EntityContext":
        return cls(
            label=rec["label"],
            description=rec.get("description") or "",
            aliases=tuple(rec.get("aliases") or ()),
            wiki_paragraph=rec.get("wiki_paragraph"),
            external_id=rec.get("external_id"),
        )


@dataclass(frozen=True)
class RelationContext:
    """Supporting sentences for one triple, best first."""

    sentences: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        sents = tuple((str(text), float(score)) for text, score in self.sentences)
        prev = float("inf")
        for _, score in sents:
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"sentence score {score} outside [0, 1]")
            if score > prev:
                raise ValueError("relation context scores must be non-increasing")
            prev = score
        object.__setattr__(self, "sentences", sents)

    def __len__(self):
        return len(self.sentences)

    def texts(self, limit: int | None = None) -> list[str]:
        return [t for t, _ in self.sentences[:limit]]


@dataclass(frozen=True)
class Quadruple:
    h: str
    r: Relation
    t: str
    rc: RelationContext | None = None

    @property
    def triple(self) -> tuple[str, Relation, str]:
        return (self.h, self.r, self.t)

    def reverse(self) -> "Quadruple":
        return Quadruple(self.t, self.r.inverse(), self.h, self.rc)

    def forward(self) -> "Quadruple":
        return self.reverse() if self.r.reversed else self


@dataclass
class _Adjacency:
    rows: np.ndarray  # (n, 3) int64 view rows (head, relation, tail), sorted
    offsets: np.ndarray  # CSR offsets keyed by rows[:, key]


class ContextGraph:
    """Entities, relations, split triples and their contexts."""

    def __init__(self):
        self._entity_set: set[str] = set()
        self._relation_set: set[str] = set()
        self._raw: dict[str, list[tuple[str, str, str]]] = {s: [] for s in SPLITS}
        self._seen: dict[str, set[tuple[str, str, str]]] = {s: set() for s in SPLITS}
        self.duplicates: dict[str, int] = {s: 0 for s in SPLITS}
        self._entity_contexts: dict[str, EntityContext] = {}
        self._relation_contexts: dict[tuple[str, str, str], RelationContext] = {}
        self._frozen = False
        self._label_index: dict[str, list[str]] | None = None
        self._alias_index: dict[str, list[str]] | None = None

    # ------------------------------------------------------------------ build

    def add_triple(self, h: str, r: str, t: str, split: str = "train") -> bool:
        """Append one triple; returns False (and counts a duplicate) if already present."""
        if self._frozen:
            raise FrozenGraphError("graph is frozen; triples can no longer be added")
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        if not h or not r or not t:
            raise ValueError("empty id in triple")
        if r.endswith(REVERSE_SUFFIX):
            raise ValueError(f"relation ids may not end with {REVERSE_SUFFIX!r}: {r!r}")
        key = (h, r, t)
        if key in self._seen[split]:
            self.duplicates[split] += 1
            return False
        self._seen[split].add(key)
        self._raw[split].append(key)
        self._entity_set.update((h, t))
        self._relation_set.add(r)
        return True

    def load_triples(self, path, split: str = "train") -> int:
        """Read a tab-separated triple file into ``split``; returns the number added."""
        path = Path(path)
        added = 0
        dup_before = self.duplicates.get(split, 0)
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\r\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 3 or not all(p.strip() for p in parts):
                    raise MalformedTripleError(path, lineno, line)
                h, r, t = (p.strip() for p in parts)
                added += self.add_triple(h, r, t, split)
        dups = self.duplicates[split] - dup_before
        if dups:
            log.warning("%s: %d duplicate triple(s) skipped in split %r", path, dups, split)
        return added

    @classmethod
    def from_triples(cls, splits: Mapping[str, Iterable[tuple[str, str, str]]]) -> "ContextGraph":
        g = cls()
        for split, triples in splits.items():
            for h, r, t in triples:
                g.add_triple(h, r, t, split)
        g.freeze()
        return g

    def freeze(self) -> "ContextGraph":
        """Sort vocabularies, build indices, and forbid further triple insertion."""
        if self._frozen:
            return self
        self.entity_ids: tuple[str, ...] = tuple(sorted(self._entity_set))
        self._entity_index = {e: i for i, e in enumerate(self.entity_ids)}
        fwd = sorted(self._relation_set)
        self.relation_ids: tuple[Relation, ...] = tuple(
            rel for raw in fwd for rel in (Relation(raw), Relation(raw, True))
        )
        self._relation_index = {rel: i for i, rel in enumerate(self.relation_ids)}
        self._arrays: dict[str, np.ndarray] = {}
        for split in SPLITS:
            arr = np.array(
                [
                    (self._entity_index[h], self._relation_index[Relation(r)], self._entity_index[t])
                    for h, r, t in self._raw[split]
                ],
                dtype=np.int64,
            ).reshape(-1, 3)
            self._arrays[split] = arr
        train = self._arrays["train"]
        in_train = np.zeros(len(self.entity_ids), dtype=bool)
        in_train[train[:, 0]] = True
        in_train[train[:, 2]] = True
        self.unseen_entities = frozenset(e for e, ok in zip(self.entity_ids, in_train) if not ok)
        train_rels = {self.relation_ids[i].raw for i in np.unique(train[:, 1])}
        self.unseen_relations = frozenset(set(fwd) - train_rels)
        if self.unseen_entities or self.unseen_relations:
            log.info(
                "%d entities and %d relations appear only outside the train split",
                len(self.unseen_entities),
                len(self.unseen_relations),
            )
        views = np.concatenate([train, train[:, [2, 1, 0]] + np.array([0, 1, 0])])
        n = len(self.entity_ids)
        self._out = self._csr(views, key=0, n=n)
        self._in = self._csr(views, key=2, n=n)
        degree = np.bincount(train[:, 0], minlength=n) + np.bincount(train[:, 2], minlength=n)
        self.degree = degree
        self._frozen = True
        return self

    @staticmethod
    def _csr(views: np.ndarray, key: int, n: int) -> _Adjacency:
        if key == 0:
            order = np.lexsort((views[:, 2], views[:, 1], views[:, 0]))
        else:
            order = np.lexsort((views[:, 1], views[:, 0], views[:, 2]))
        rows = views[order]
        counts = np.bincount(rows[:, key], minlength=n)
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return _Adjacency(rows, offsets)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def _require_frozen(self):
        if not self._frozen:
            self.freeze()

    # ----------------------------------------------------------- vocabulary

    @property
    def num_entities(self) -> int:
        self._require_frozen()
        return len(self.entity_ids)

    @property
    def num_relations(self) -> int:
        """Relation vocabulary size, reversed twins included."""
        self._require_frozen()
        return len(self.relation_ids)

    def entity_index(self, e: str) -> int:
        self._require_frozen()
        try:
            return self._entity_index[e]
        except KeyError:
            raise UnknownEntityError(e) from None

    def relation_index(self, r: Relation | str) -> int:
        self._require_frozen()
        if isinstance(r, str):
            r = Relation.parse(r)
        try:
            return self._relation_index[r]
        except KeyError:
            raise UnknownRelationError(str(r)) from None

    def has_entity(self, e: str) -> bool:
        return e in self._entity_set

    def split_array(self, split: str) -> np.ndarray:
        """(n, 3) int array of (head, forward-relation, tail) indices."""
        self._require_frozen()
        return self._arrays[split]

    def triples(self, split: str = "train") -> list[tuple[str, Relation, str]]:
        self._require_frozen()
        return [(h, Relation(r), t) for h, r, t in self._raw[split]]

    def quads(self, split: str = "train") -> list[Quadruple]:
        return [Quadruple(h, r, t, self.relation_context(h, r, t)) for h, r, t in self.triples(split)]

    def vocab_hash(self) -> str:
        self._require_frozen()
        return vocab_hash(self.entity_ids, self.relation_ids)

    # -------------------------------------------------------------- queries

    def view(self, row) -> Quadruple:
        h, r, t = (int(x) for x in row)
        rel = self.relation_ids[r]
        return Quadruple(self.entity_ids[h], rel, self.entity_ids[t], self.relation_context(
            self.entity_ids[h], rel, self.entity_ids[t]))

    def neighbor_rows(self, e: str, direction: Direction = "out") -> np.ndarray:
        """Index-level ``neighbors``: (n, 3) rows of (head, relation, tail) views."""
        i = self.entity_index(e)
        parts = []
        if direction in ("out", "both"):
            parts.append(self._out.rows[self._out.offsets[i]: self._out.offsets[i + 1]])
        if direction in ("in", "both"):
            parts.append(self._in.rows[self._in.offsets[i]: self._in.offsets[i + 1]])
        if not parts:
            raise ValueError(f"direction must be out, in or both, got {direction!r}")
        return parts[0] if len(parts) == 1 else np.concatenate(parts)

    def neighbors(self, e: str, direction: Direction = "out") -> list[Quadruple]:
        """Train-split triples touching ``e``, reversed views included.

        ``out`` lists every view with ``e`` as head, i.e. forward triples
        ``(e, r, t)`` plus ``(e, r^-1, h)`` for each ``(h, r, e)``. ``in`` lists
        views with ``e`` as tail; ``both`` is their concatenation.
        """
        return [self.view(row) for row in self.neighbor_rows(e, direction)]

    def relations_of(self, e: str) -> list[Relation]:
        """Relations (reversed included) incident to ``e`` in train, sorted."""
        rows = self.neighbor_rows(e, "out")
        return [self.relation_ids[i] for i in np.unique(rows[:, 1])]

    # --------------------------------------------------------------- contexts

    @property
    def entity_contexts(self) -> Mapping[str, EntityContext]:
        return MappingProxyType(self._entity_contexts)

    @property
    def relation_contexts(self) -> Mapping[tuple[str, str, str], RelationContext]:
        return MappingProxyType(self._relation_contexts)

    def set_entity_context(self, e: str, ctx: EntityContext) -> None:
        if e not in self._entity_set:
            raise UnknownEntityError(e)
        self._entity_contexts[e] = ctx
        self._label_index = self._alias_index = None

    def set_relation_context(self, h: str, r: Relation | str, t: str, ctx: RelationContext) -> None:
        rel = Relation.parse(r) if isinstance(r, str) else r
        if rel.reversed:
            h, rel, t = t, rel.inverse(), h
        self._relation_contexts[(h, rel.raw, t)] = ctx

    def relation_context(self, h: str, r: Relation, t: str) -> RelationContext | None:
        if r.reversed:
            return self._relation_contexts.get((t, r.raw, h))
        return self._relation_contexts.get((h, r.raw, t))

    def label_of(self, e: str) -> str:
        ctx = self._entity_contexts.get(e)
        return ctx.label if ctx else e

    def description_of(self, e: str) -> str:
        ctx = self._entity_contexts.get(e)
        return ctx.description if ctx else ""

    def _build_surface_index(self):
        labels: dict[str, list[str]] = {}
        aliases: dict[str, list[str]] = {}
        for e in sorted(self._entity_set):
            ctx = self._entity_contexts.get(e)
            labels.setdefault(normalize_surface(ctx.label if ctx else e), []).append(e)
            if ctx:
                for alias in ctx.aliases:
                    aliases.setdefault(normalize_surface(alias), []).append(e)
        self._label_index, self._alias_index = labels, aliases
        self._surface_keys = frozenset(labels) | frozenset(aliases)

    def resolve_entity(self, surface: str) -> str | None:
        """Map a surface string to an entity id: labels first, then aliases.

        Matching is case-insensitive after whitespace normalisation; among
        several matches the lexicographically smallest id wins.
        """
        key = normalize_surface(surface or "")
        if not key:
            return None
        if self._label_index is None:
            self._build_surface_index()
        for index in (self._label_index, self._alias_index):
            hits = index.get(key)
            if hits:
                return hits[0]
        return None

    def surface_keys(self) -> frozenset[str]:
        """Every normalised label and alias; handy as a parsing vocabulary."""
        if self._label_index is None:
            self._build_surface_index()
        return self._surface_keys

    def surface_forms(self, e: str) -> list[str]:
        ctx = self._entity_contexts.get(e)
        if ctx is None:
            return [e]
        return [ctx.label, *ctx.aliases]

    # ------------------------------------------------------------- snapshots

    def save(self, directory) -> None:
        """Write triples and contexts as a directory snapshot."""
        self._require_frozen()
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for split in SPLITS:
            with (d / f"{split}.txt").open("w", encoding="utf-8", newline="\n") as fh:
                for h, r, t in self._raw[split]:
                    fh.write(f"{h}\t{r}\t{t}\n")
        write_entity_contexts(self, d / "entity_contexts.jsonl")
        write_relation_contexts(self, d / "relation_contexts.jsonl")

    @classmethod
    def load(cls, directory) -> "ContextGraph":
        d = Path(directory)
        g = cls()
        for split in SPLITS:
            p = d / f"{split}.txt"
            if p.exists():
                g.load_triples(p, split)
        g.freeze()
        if (d / "entity_contexts.jsonl").exists():
            read_entity_contexts(g, d / "entity_contexts.jsonl")
        if (d / "relation_contexts.jsonl").exists():
            read_relation_contexts(g, d / "relation_contexts.jsonl")
        return g


def vocab_hash(entity_ids: Iterable[str], relation_ids: Iterable[Relation]) -> str:
    """sha256 over the ordered entity and relation vocabularies."""
    h = hashlib.sha256()
    for e in entity_ids:
        h.update(e.encode("utf-8") + b"\n")
    h.update(b"\x00")
    for r in relation_ids:
        h.update(str(r).encode("utf-8") + b"\n")
    return h.hexdigest()


def _iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    yield lineno, json.loads(line)
                except json.JSONDecodeError as exc:
                    raise GraphError(f"{path}:{lineno}: invalid JSON ({exc})") from None


def _dump(rec: dict) -> str:
    return json.dumps(rec, ensure_ascii=False, sort_keys=False) + "\n"


def write_entity_contexts(graph: ContextGraph, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for e in sorted(graph.entity_contexts):
            fh.write(_dump(graph.entity_contexts[e].to_record(e)))


def read_entity_contexts(graph: ContextGraph, path) -> int:
    n = 0
    for lineno, rec in _iter_jsonl(path):
        e = rec.get("entity_id")
        if not graph.has_entity(e):
            log.warning("%s:%d: context for unknown entity %r ignored", path, lineno, e)
            continue
        graph.set_entity_context(e, EntityContext.from_record(rec))
        n += 1
    return n


def write_relation_contexts(graph: ContextGraph, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for (h, r, t) in sorted(graph.relation_contexts):
            rc = graph.relation_contexts[(h, r, t)]
            fh.write(_dump({
                "h": h, "r": r, "t": t,
                "sentences": [{"text": text, "score": score} for text, score in rc.sentences],
            }))


def read_relation_contexts(graph: ContextGraph, path) -> int:
    n = 0
    for _, rec in _iter_jsonl(path):
        rc = RelationContext(tuple((s["text"], s["score"]) for s in rec.get("sentences", [])))
        graph.set_relation_context(rec["h"], rec["r"], rec["t"], rc)
        n += 1
    return n
