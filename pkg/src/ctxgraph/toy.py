"""Small synthetic graphs for tests, benchmarks and demos."""
from __future__ import annotations

import numpy as np

from .graph import ContextGraph, EntityContext


def _name(prefix: str, i: int, width: int = 2) -> str:
    return f"{prefix}{i:0{width}d}"


def random_graph(seed: int, n_entities: int = 50, n_relations: int = 8, n_triples: int = 300,
                 valid_frac: float = 0.1, test_frac: float = 0.1) -> ContextGraph:
    """Uniformly random triples (no learnable structure), split three ways."""
    rng = np.random.default_rng(seed)
    seen: set[tuple[str, str, str]] = set()
    triples = []
    while len(triples) < n_triples:
        h, t = rng.integers(0, n_entities, size=2)
        r = rng.integers(0, n_relations)
        key = (_name("e", h), _name("r", r), _name("e", t))
        if key not in seen:
            seen.add(key)
            triples.append(key)
    n_valid = int(valid_frac * n_triples)
    n_test = int(test_frac * n_triples)
    return ContextGraph.from_triples({
        "test": triples[:n_test],
        "valid": triples[n_test:n_test + n_valid],
        "train": triples[n_test + n_valid:],
    })


def inverse_pattern_graph(seed: int, n_entities: int = 40, n_pairs: int = 3, facts_per_relation: int = 40,
                          holdout: int = 20) -> ContextGraph:
    """Relation pairs ``(p_k, q_k)`` with ``q_k`` the inverse of ``p_k``.

    Every fact ``(x, p_k, y)`` also appears as ``(y, q_k, x)``. Held-out
    (valid/test) triples are drawn so that their inverse partner stays in
    train, making them predictable from structure alone.
    """
    rng = np.random.default_rng(seed)
    facts = []
    for k in range(n_pairs):
        seen = set()
        while len(seen) < facts_per_relation:
            x, y = rng.integers(0, n_entities, size=2)
            if x != y:
                seen.add((int(x), int(y)))
        for x, y in sorted(seen):
            facts.append(((_name("e", x), f"p{k}", _name("e", y)), (_name("e", y), f"q{k}", _name("e", x))))
    order = rng.permutation(len(facts))
    held = [facts[i][int(rng.integers(0, 2))] for i in order[:holdout]]
    held_set = set(held)
    train = [tr for pair in facts for tr in pair if tr not in held_set]
    half = len(held) // 2
    return ContextGraph.from_triples({"train": train, "valid": held[:half], "test": held[half:]})


def chain_graph(length: int = 12) -> ContextGraph:
    """``n00 -next-> n01 -next-> ...`` with ``length`` triples."""
    return ContextGraph.from_triples({"train": [(_name("n", i), "next", _name("n", i + 1)) for i in range(length)]})


def label_toy_entities(graph: ContextGraph, words: list[str] | None = None) -> None:
    """Attach readable labels/descriptions so text stages have something to chew on."""
    words = words or ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
                      "india", "juliet", "kilo", "lima", "mike", "november", "oscar", "papa"]
    for i, e in enumerate(graph.entity_ids):
        w1 = words[i % len(words)]
        w2 = words[(i // len(words)) % len(words)]
        graph.set_entity_context(e, EntityContext(
            label=f"{w1.title()} {w2.title()} {i}",
            description=f"toy entity {w1} {w2}",
            wiki_paragraph=f"{w1.title()} {w2.title()} {i} is a toy entity. It is related to {w2} things. "
                           f"The {w1} group contains it.",
        ))
