"""RankedList: the ordered entity list passed between KGE, LLM and eval stages."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class RankedList:
    """Entity indices best-first, over a shared vocabulary.

    ``order`` holds indices into ``vocab``; ``scores`` (optional) is aligned
    with ``order``.
    """

    order: np.ndarray
    vocab: Sequence[str]
    scores: np.ndarray | None = None

    @classmethod
    def from_scores(cls, scores: np.ndarray, vocab: Sequence[str]) -> "RankedList":
        """Sort by descending score; equal scores keep vocabulary (lexicographic) order."""
        scores = np.asarray(scores, dtype=float)
        if len(scores) != len(vocab):
            raise ValueError("one score per vocabulary entry required")
        order = np.argsort(-scores, kind="stable")
        return cls(order, vocab, scores[order])

    @classmethod
    def from_ids(cls, ids: Iterable[str], vocab: Sequence[str], index: dict[str, int] | None = None) -> "RankedList":
        index = index or {e: i for i, e in enumerate(vocab)}
        return cls(np.array([index[e] for e in ids], dtype=np.int64), vocab)

    def __len__(self) -> int:
        return len(self.order)

    def __iter__(self):
        return iter(self.ids())

    def ids(self) -> list[str]:
        return [self.vocab[i] for i in self.order]

    def top(self, n: int) -> list[str]:
        return [self.vocab[i] for i in self.order[:n]]

    def position(self, entity_index: int) -> int:
        """0-based position of an entity index; raises ValueError when absent."""
        hits = np.flatnonzero(self.order == entity_index)
        if not hits.size:
            raise ValueError(f"entity index {entity_index} not in list")
        return int(hits[0])

    def is_permutation_of(self, n: int) -> bool:
        return len(self.order) == n and np.array_equal(np.sort(self.order), np.arange(n))
