"""Query/sentence similarity scorers.

Two interchangeable backends expose ``scores(query, candidates)`` returning an
array in [0, 1]:

* :class:`LexicalScorer` - BM25 term weighting (k1=1.2, b=0.75) with corpus
  statistics, normalised per query batch by dividing by the batch maximum.
* :class:`RemoteEmbeddingScorer` - cosine similarity of embeddings fetched
  from an HTTP endpoint, mapped to [0, 1] with ``(x + 1) / 2``.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from typing import Protocol, Sequence

import numpy as np

from ._http import api_key_headers

_TOKEN = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.casefold())


class SimilarityScorer(Protocol):
    def scores(self, query: str, candidates: Sequence[str]) -> np.ndarray: ...


def score(scorer: SimilarityScorer, query: str, candidate: str) -> float:
    return float(scorer.scores(query, [candidate])[0])


def top_k(scorer: SimilarityScorer, query: str, candidates: Sequence[str], k: int) -> list[int]:
    """Indices of the ``k`` best candidates, best first; ties keep the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not candidates:
        return []
    s = np.asarray(scorer.scores(query, list(candidates)), dtype=float)
    return np.argsort(-s, kind="stable")[:k].tolist()


class LexicalScorer:
    """BM25 scorer.

    With a ``corpus`` the document frequencies and average length come from
    it; without one each call uses its own candidate batch as the corpus.
    """

    def __init__(self, corpus: Sequence[str] | None = None, k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self._df: Counter | None = None
        self._n_docs = 0
        self._avgdl = 0.0
        if corpus is not None:
            self.fit(corpus)

    def fit(self, corpus: Sequence[str]) -> "LexicalScorer":
        df: Counter = Counter()
        total = 0
        for doc in corpus:
            toks = tokenize(doc)
            total += len(toks)
            df.update(set(toks))
        self._df = df
        self._n_docs = len(corpus)
        self._avgdl = total / len(corpus) if corpus else 0.0
        return self

    @staticmethod
    def _idf(df: int, n_docs: int) -> float:
        return math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))

    def raw_scores(self, query: str, candidates: Sequence[str]) -> np.ndarray:
        docs = [Counter(tokenize(c)) for c in candidates]
        lengths = [sum(d.values()) for d in docs]
        if self._df is not None and self._n_docs:
            df, n_docs, avgdl = self._df, self._n_docs, self._avgdl
        else:
            df = Counter()
            for d in docs:
                df.update(d.keys())
            n_docs = len(docs)
            avgdl = sum(lengths) / n_docs if n_docs else 0.0
        avgdl = avgdl or 1.0
        terms = set(tokenize(query))
        idf = {t: self._idf(df.get(t, 0), n_docs) for t in terms}
        out = np.zeros(len(docs))
        k1, b = self.k1, self.b
        for i, (d, dl) in enumerate(zip(docs, lengths)):
            norm = k1 * (1.0 - b + b * dl / avgdl)
            s = 0.0
            for t in terms:
                tf = d.get(t, 0)
                if tf:
                    s += idf[t] * tf * (k1 + 1.0) / (tf + norm)
            out[i] = s
        return out

    def scores(self, query: str, candidates: Sequence[str]) -> np.ndarray:
        raw = self.raw_scores(query, candidates)
        top = raw.max() if raw.size else 0.0
        if top <= 0.0:
            return np.zeros_like(raw)
        return raw / top


class RemoteScorerError(RuntimeError):
    def __init__(self, message: str, batch: Sequence[str]):
        super().__init__(message)
        self.batch = list(batch)


class RemoteEmbeddingScorer:
    """Cosine similarity over embeddings from an HTTP endpoint.

    The endpoint receives ``POST {"model": ..., "input": [texts]}`` and must
    answer either a bare list of vectors, ``{"embeddings": [...]}`` or the
    OpenAI-style ``{"data": [{"embedding": [...]}, ...]}``.
    """

    def __init__(self, endpoint: str, model: str | None = None, api_key_env: str | None = "CTXGRAPH_EMBED_API_KEY",
                 timeout: float = 30.0, client=None):
        import httpx

        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        try:
            resp = self._client.post(
                self.endpoint,
                json={"model": self.model, "input": texts},
                headers=api_key_headers(self.api_key_env),
            )
            resp.raise_for_status()
            body = resp.json()
        except Exception as exc:
            raise RemoteScorerError(f"embedding request failed: {exc}", texts) from exc
        if isinstance(body, dict):
            if "embeddings" in body:
                body = body["embeddings"]
            elif "data" in body:
                body = [item["embedding"] for item in body["data"]]
        try:
            vecs = np.asarray(body, dtype=float)
        except (TypeError, ValueError) as exc:
            raise RemoteScorerError(f"malformed embedding response: {exc}", texts) from exc
        if vecs.ndim != 2 or len(vecs) != len(texts):
            raise RemoteScorerError(f"expected {len(texts)} equal-length vectors, got shape {vecs.shape}", texts)
        return vecs

    def scores(self, query: str, candidates: Sequence[str]) -> np.ndarray:
        if not candidates:
            return np.zeros(0)
        vecs = self.embed([query, *candidates])
        norms = np.linalg.norm(vecs, axis=1)
        norms[norms == 0] = 1.0
        unit = vecs / norms[:, None]
        cos = unit[1:] @ unit[0]
        return np.clip((cos + 1.0) / 2.0, 0.0, 1.0)
