"""ComplEx and RotatE models over a frozen graph vocabulary."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..graph import ContextGraph, Relation, vocab_hash
from ..ranking import RankedList
from . import kernels


class UnknownIdError(KeyError):
    def __str__(self):
        return f"id not in model vocabulary: {self.args[0]!r}"


def wrap_phase(phase: np.ndarray) -> np.ndarray:
    """Map angles into (-pi, pi] in place."""
    phase -= 2.0 * np.pi * np.ceil((phase - np.pi) / (2.0 * np.pi))
    return phase


class KgeModel:
    """Shared vocabulary handling, scoring and ranking.

    Subclasses provide ``tail_scores(h_idx, r_idx) -> (Q, n_entities)``
    where higher means more plausible. Head queries ``(?, r, t)`` are ranked
    as tail queries ``(t, r^-1, ?)``.
    """

    kind = "base"

    def __init__(self, entity_ids: Sequence[str], relation_ids: Sequence[Relation],
                 ent: np.ndarray, rel: np.ndarray, config: Mapping | None = None):
        self.entity_ids = tuple(entity_ids)
        self.relation_ids = tuple(relation_ids)
        self._eidx = {e: i for i, e in enumerate(self.entity_ids)}
        self._ridx = {r: i for i, r in enumerate(self.relation_ids)}
        self.ent = np.ascontiguousarray(ent, dtype=np.float64)
        self.rel = np.ascontiguousarray(rel, dtype=np.float64)
        self.config = dict(config or {})
        if self.ent.shape[0] != len(self.entity_ids) or self.rel.shape[0] != len(self.relation_ids):
            raise ValueError("embedding tables do not match vocabulary sizes")

    @property
    def dim(self) -> int:
        return self.ent.shape[1] // 2

    def vocab_hash(self) -> str:
        return vocab_hash(self.entity_ids, self.relation_ids)

    def entity_index(self, e: str) -> int:
        try:
            return self._eidx[e]
        except KeyError:
            raise UnknownIdError(e) from None

    def relation_index(self, r: Relation | str) -> int:
        rel = Relation.parse(r) if isinstance(r, str) else r
        try:
            return self._ridx[rel]
        except KeyError:
            raise UnknownIdError(str(rel)) from None

    def tail_scores(self, h_idx, r_idx) -> np.ndarray:
        raise NotImplementedError

    def triple_scores(self, h_idx, r_idx, t_idx) -> np.ndarray:
        raise NotImplementedError

    def score(self, h: str, r: Relation | str, t: str) -> float:
        hi, ri, ti = self.entity_index(h), self.relation_index(r), self.entity_index(t)
        return float(self.triple_scores(np.array([hi]), np.array([ri]), np.array([ti]))[0])

    def rank_all(self, known: str, relation: Relation | str, direction: str = "tail") -> RankedList:
        """All entities best-first for ``(known, r, ?)`` (or ``(?, r, known)`` with direction='head')."""
        rel = Relation.parse(relation) if isinstance(relation, str) else relation
        if direction == "head":
            rel = rel.inverse()
        elif direction != "tail":
            raise ValueError("direction must be 'tail' or 'head'")
        scores = self.tail_scores(np.array([self.entity_index(known)]), np.array([self.relation_index(rel)]))[0]
        return RankedList.from_scores(scores, self.entity_ids)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"entity": self.ent, "relation": self.rel}

    def copy(self) -> "KgeModel":
        return type(self)(self.entity_ids, self.relation_ids, self.ent.copy(), self.rel.copy(), self.config)


class ComplEx(KgeModel):
    """``Re(<e_h, w_r, conj(e_t)>)``."""

    kind = "complex"

    @classmethod
    def init(cls, entity_ids, relation_ids, dim: int, rng: np.random.Generator, scale: float,
             config: Mapping | None = None) -> "ComplEx":
        ent = rng.normal(0.0, scale, size=(len(entity_ids), 2 * dim))
        rel = rng.normal(0.0, scale, size=(len(relation_ids), 2 * dim))
        return cls(entity_ids, relation_ids, ent, rel, config)

    def _hr(self, h_idx, r_idx):
        return kernels._cmul_np(self.ent[h_idx], self.rel[r_idx], self.dim)

    def tail_scores(self, h_idx, r_idx) -> np.ndarray:
        return self._hr(h_idx, r_idx) @ self.ent.T

    def triple_scores(self, h_idx, r_idx, t_idx) -> np.ndarray:
        return np.einsum("bd,bd->b", self._hr(h_idx, r_idx), self.ent[t_idx])


class RotatE(KgeModel):
    """``-sum_k |e_h,k * exp(i theta_r,k) - e_t,k|``; relations hold phases only."""

    kind = "rotate"

    @classmethod
    def init(cls, entity_ids, relation_ids, dim: int, rng: np.random.Generator, margin: float,
             config: Mapping | None = None) -> "RotatE":
        bound = (margin + 2.0) / dim
        ent = rng.uniform(-bound, bound, size=(len(entity_ids), 2 * dim))
        phase = rng.uniform(-np.pi, np.pi, size=(len(relation_ids), dim))
        return cls(entity_ids, relation_ids, ent, wrap_phase(phase), config)

    @property
    def dim(self) -> int:
        return self.rel.shape[1]

    def _hr(self, h_idx, r_idx):
        return kernels._cmul_np(self.ent[h_idx], kernels._rotation(self.rel[r_idx]), self.dim)

    def tail_scores(self, h_idx, r_idx) -> np.ndarray:
        return kernels.rotate_scores(np.ascontiguousarray(self._hr(h_idx, r_idx)), self.ent)

    def triple_scores(self, h_idx, r_idx, t_idx) -> np.ndarray:
        diff = self._hr(h_idx, r_idx) - self.ent[t_idx]
        d = self.dim
        return -np.sqrt(diff[:, :d] ** 2 + diff[:, d:] ** 2).sum(1)


class ScoreTableModel(KgeModel):
    """Fixed per-query scores, for externally trained models or hand-built fixtures.

    ``table`` maps ``(known_entity, str(relation))`` for tail queries to a
    score vector over ``entity_ids``; missing queries score all zeros.
    """

    kind = "table"

    def __init__(self, entity_ids, relation_ids, table: Mapping[tuple[str, str], Sequence[float]]):
        super().__init__(entity_ids, relation_ids, np.zeros((len(entity_ids), 0)), np.zeros((len(relation_ids), 0)))
        self.table = {k: np.asarray(v, dtype=float) for k, v in table.items()}

    @classmethod
    def from_rankings(cls, graph: ContextGraph, rankings: Mapping[tuple[str, str], Sequence[str]]) -> "ScoreTableModel":
        """Build from best-first id lists; unlisted entities tie below every listed one."""
        n = graph.num_entities
        table = {}
        for key, ids in rankings.items():
            s = np.zeros(n)
            for pos, e in enumerate(ids):
                s[graph.entity_index(e)] = len(ids) - pos
            table[key] = s
        return cls(graph.entity_ids, graph.relation_ids, table)

    def tail_scores(self, h_idx, r_idx) -> np.ndarray:
        out = np.zeros((len(h_idx), len(self.entity_ids)))
        for q, (h, r) in enumerate(zip(h_idx, r_idx)):
            key = (self.entity_ids[h], str(self.relation_ids[r]))
            if key in self.table:
                out[q] = self.table[key]
        return out

    def triple_scores(self, h_idx, r_idx, t_idx) -> np.ndarray:
        return self.tail_scores(h_idx, r_idx)[np.arange(len(t_idx)), t_idx]


MODEL_KINDS = {"complex": ComplEx, "rotate": RotatE}
