"""Turn raw model replies into lists.

Items are separated by commas, but labels may contain commas too. When a
vocabulary of normalised surface forms is available, the body is first
segmented so that every item is a known surface form, taking the longest
match first and backtracking if needed. If no complete segmentation exists
the parser falls back to greedy matching: a known form if one starts at the
current piece, otherwise the single comma-delimited piece.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Collection

from ..graph import normalize_surface
from .templates import (ANSWER_PREFIX, ANSWERS, FINAL_ORDER, QUERY_SELECTION, SUFFICIENCY, SUFFICIENT_PREFIX,
                        PromptBundle)

_STRIP = " \t\r\n'\"`*"


class ReplyParseError(ValueError):
    def __init__(self, kind: str, raw: str, reason: str):
        self.kind = kind
        self.raw = raw
        self.reason = reason
        super().__init__(f"cannot parse {kind} reply ({reason}): {raw[:200]!r}")


@dataclass(frozen=True)
class ParsedReply:
    kind: str
    items: tuple[str, ...]
    raw: str
    sufficient: bool | None = None
    indices: tuple[int, ...] = ()


def _after_prefix(raw: str, prefix: str) -> str | None:
    i = raw.casefold().find(prefix.casefold())
    if i < 0:
        return None
    return raw[i + len(prefix):]


def _list_body(text: str) -> str:
    """The bracketed list if the text starts with one, else the first line."""
    text = text.strip()
    if text.startswith("["):
        end = text.rfind("]")
        if end > 0:
            return text[1:end]
        return text[1:]
    return text.split("\n", 1)[0]


def _clean(item: str) -> str:
    return item.strip(_STRIP)


def split_items(body: str, vocabulary: Collection[str] | None = None) -> list[str]:
    pieces = body.split(",")
    n = len(pieces)
    if not vocabulary:
        return [c for c in (_clean(p) for p in pieces) if c]

    @lru_cache(maxsize=None)
    def known(i: int, j: int) -> bool:
        item = _clean(",".join(pieces[i:j]))
        return bool(item) and normalize_surface(item) in vocabulary

    @lru_cache(maxsize=None)
    def full(i: int) -> tuple[tuple[int, int], ...] | None:
        # (start, end) piece spans segmenting pieces[i:] into known items
        if i == n:
            return ()
        if not _clean(pieces[i]):
            return full(i + 1)
        for j in range(n, i, -1):
            if known(i, j):
                rest = full(j)
                if rest is not None:
                    return ((i, j),) + rest
        return None

    spans = full(0)
    if spans is None:
        spans, i = [], 0
        while i < n:
            j = next((j for j in range(n, i, -1) if known(i, j)), i + 1)
            spans.append((i, j))
            i = j
    items = [_clean(",".join(pieces[i:j])) for i, j in spans]
    return [x for x in items if x]


def parse_list(raw: str, prefix: str, vocabulary: Collection[str] | None = None, kind: str = ANSWERS) -> list[str]:
    rest = _after_prefix(raw, prefix)
    if rest is None:
        raise ReplyParseError(kind, raw, f"missing prefix {prefix!r}")
    body = _list_body(rest)
    items = split_items(body, vocabulary)
    if items and not rest.strip().startswith("[") and items[-1].endswith("."):
        # unbracketed lists often end with a full stop; keep it only if it is part of a known form
        last = items[-1]
        if not (vocabulary and normalize_surface(last) in vocabulary):
            items[-1] = _clean(last[:-1])
            if not items[-1]:
                items.pop()
    if not items:
        raise ReplyParseError(kind, raw, "empty list")
    return items


def parse_selection(raw: str, prefix: str, choices: int) -> tuple[int, ...]:
    """1-based option numbers, deduplicated in reply order, each within ``1..choices``."""
    rest = _after_prefix(raw, prefix)
    if rest is None:
        raise ReplyParseError(QUERY_SELECTION, raw, f"missing prefix {prefix!r}")
    body = _list_body(rest)
    out = []
    for tok in re.findall(r"\d+", body):
        k = int(tok)
        if not 1 <= k <= choices:
            raise ReplyParseError(QUERY_SELECTION, raw, f"option {k} out of range 1..{choices}")
        if k not in out:
            out.append(k)
    if not out:
        raise ReplyParseError(QUERY_SELECTION, raw, "no option numbers")
    return tuple(out)


def parse_sufficiency(raw: str, vocabulary: Collection[str] | None = None) -> ParsedReply:
    rest = _after_prefix(raw, SUFFICIENT_PREFIX)
    if rest is None:
        raise ReplyParseError(SUFFICIENCY, raw, f"missing prefix {SUFFICIENT_PREFIX!r}")
    m = re.match(r"\s*\W*\s*(yes|no)\b", rest, flags=re.IGNORECASE)
    if not m:
        raise ReplyParseError(SUFFICIENCY, raw, "verdict is neither Yes nor No")
    if m.group(1).casefold() == "no":
        return ParsedReply(SUFFICIENCY, (), raw, sufficient=False)
    items = parse_list(rest, ANSWER_PREFIX, vocabulary, kind=SUFFICIENCY)
    return ParsedReply(SUFFICIENCY, tuple(items), raw, sufficient=True)


def parse_reply(bundle: PromptBundle, raw: str) -> ParsedReply:
    kind = bundle.expected_parse
    if kind == SUFFICIENCY:
        return parse_sufficiency(raw, bundle.vocabulary)
    if kind == QUERY_SELECTION:
        idx = parse_selection(raw, bundle.prefix, bundle.choices)
        return ParsedReply(kind, tuple(str(i) for i in idx), raw, indices=idx)
    if kind in (ANSWERS, FINAL_ORDER):
        vocab = bundle.vocabulary
        if kind == FINAL_ORDER and vocab is None:
            vocab = {normalize_surface(c) for c in bundle.candidates}
        return ParsedReply(kind, tuple(parse_list(raw, bundle.prefix, vocab, kind)), raw)
    raise ValueError(f"unknown parse kind {kind!r}")
