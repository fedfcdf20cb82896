"""Prompt templates for the KGC and KGQA stages.

Every template renders plain text ending in a newline. Sections are
separated by one blank line. Slots are filled verbatim, so everything outside
them stays byte-identical from one rendering to the next.

KGC templates share a two-line header naming the masked triple and the task
sentence. Their slots are ``known`` (label of the known entity), ``relation``
(raw relation path, never a reversed id) and ``missing`` (``"head"`` or
``"tail"``).
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Collection, Mapping, Sequence

ANSWERS = "answers"
FINAL_ORDER = "final-order"
QUERY_SELECTION = "query-selection"
SUFFICIENCY = "sufficiency"

ANSWER_PREFIX = "The possible answers:"
ORDER_PREFIX = "The final order:"
TOPIC_PREFIX = "The topic entities:"
QUERY_PREFIX = "The selected queries:"
TRIPLE_PREFIX = "The selected triples:"
SUFFICIENT_PREFIX = "Sufficient:"

LIST_FORMAT = "'[answer1, answer2, ..., answerN]'"
ORDER_FORMAT = "'[most possible answer, second possible answer, ..., least possible answer]'"


class MissingSlotError(KeyError):
    def __init__(self, template_id: str, slot: str):
        self.template_id = template_id
        self.slot = slot
        super().__init__(slot)

    def __str__(self):
        return f"template {self.template_id!r} needs slot {self.slot!r}"


class UnknownTemplateError(KeyError):
    def __str__(self):
        return f"unknown template id {self.args[0]!r}"


@dataclass(frozen=True)
class PromptBundle:
    """A rendered prompt plus what the reply is expected to look like.

    ``prefix`` is the literal the reply must start its list with. ``vocabulary``
    holds normalised surface forms used to keep labels containing commas in
    one piece while parsing. ``candidates`` lists the labels the reply is
    meant to reorder or choose from, and ``choices`` counts numbered options
    for selection prompts. ``provenance`` records every context snippet
    inserted into the text.
    """

    template_id: str
    text: str
    expected_parse: str
    prefix: str
    provenance: tuple[str, ...] = ()
    candidates: tuple[str, ...] = ()
    choices: int = 0
    vocabulary: Collection[str] | None = field(default=None, compare=False, repr=False)
    preamble: tuple[str, ...] = ()

    def with_vocabulary(self, vocabulary: Collection[str] | None) -> "PromptBundle":
        return PromptBundle(self.template_id, self.text, self.expected_parse, self.prefix, self.provenance,
                            self.candidates, self.choices, vocabulary, self.preamble)

    def with_preamble(self, preamble: Sequence[str]) -> "PromptBundle":
        return PromptBundle(self.template_id, self.text, self.expected_parse, self.prefix, self.provenance,
                            self.candidates, self.choices, self.vocabulary, tuple(preamble))


# ---------------------------------------------------------------- verbalising

def _segments(raw: str) -> list[str]:
    return [p for p in re.split(r"[/.]+", raw) if p]


def relation_phrase(raw: str) -> str:
    """``/location/adjoining_relationship/adjoins`` -> ``location adjoining_relationship adjoins``."""
    return " ".join(_segments(raw))


def question_text(known: str, relation: str, missing: str) -> str:
    """Natural-language question for a masked triple, ending in ``"The answer is "``.

    Head-missing: ``"{tail} is the {last segment} of what {first segment}?"``.
    Tail-missing: ``"What is the {last segment} of {head}?"``.
    """
    segs = _segments(relation) or [relation]
    attr = segs[-1].replace("_", " ")
    if missing == "head":
        domain = segs[0].replace("_", " ")
        return f"{known} is the {attr} of what {domain}? The answer is "
    if missing == "tail":
        return f"What is the {attr} of {known}? The answer is "
    raise ValueError("missing must be 'head' or 'tail'")


def masked_triple(known: str, relation: str, missing: str) -> str:
    return f"([MASK], {relation}, {known})" if missing == "head" else f"({known}, {relation}, [MASK])"


def task_sentence(known: str, relation: str, missing: str) -> str:
    given = masked_triple(known, relation_phrase(relation), missing)
    return (f"The question is to predict the {missing} entity [MASK] from the given {given} "
            f"by completing the sentence '{question_text(known, relation, missing)}'.")


def bracket_list(items: Sequence[str]) -> str:
    return "[" + ", ".join(items) + "]"


def _context_line(label: str, description: str | None) -> str:
    return f"{label}: {description}" if description else label


# ---------------------------------------------------------------- rendering

class _Slots:
    def __init__(self, template_id: str, slots: Mapping[str, Any]):
        self.template_id = template_id
        self.slots = slots

    def __getitem__(self, name: str):
        if name not in self.slots:
            raise MissingSlotError(self.template_id, name)
        return self.slots[name]

    def get(self, name: str, default=None):
        return self.slots.get(name, default)


def _kgc_header(s: _Slots) -> list[str]:
    known, relation, missing = s["known"], s["relation"], s["missing"]
    if missing not in ("head", "tail"):
        raise ValueError(f"{s.template_id}: missing must be 'head' or 'tail', got {missing!r}")
    return [
        f"## KG Triplet for completion: {masked_triple(known, relation, missing)}",
        "",
        f'## Task for completion: "{task_sentence(known, relation, missing)}"',
    ]


def _demo_blocks(s: _Slots, contextual: bool) -> tuple[list[str], list[str]]:
    lines, prov = [], []
    for i, demo in enumerate(s["demos"], start=1):
        sentence = task_sentence(demo["known"], s["relation"], s["missing"])
        answer = f"The answer is {demo['answer']}, so the [MASK] is {demo['answer']}."
        if contextual:
            kd, ad = demo.get("known_description"), demo.get("answer_description")
            if kd:
                sentence = f"{demo['known']}: {kd} {sentence}"
                prov.append(f"{demo['known']}: {kd}")
            if ad:
                answer = f"{answer} {demo['answer']}: {ad}"
                prov.append(f"{demo['answer']}: {ad}")
        lines += [f'## Demo {i}: "{sentence}"', f'"{answer}"', ""]
    return lines, prov


def _retrieval(s: _Slots, contextual: bool) -> tuple[list[str], list[str], tuple[str, ...]]:
    title = "## Task demonstrations with Contextual Retrieval:" if contextual else "## Task demonstrations:"
    demo_lines, prov = _demo_blocks(s, contextual)
    cands = list(s["candidates"])
    lines = _kgc_header(s) + ["", title, ""] + demo_lines + [f"## Candidate entities: {bracket_list(cands)}"]
    if contextual:
        descs = list(s["candidate_descriptions"])
        if len(descs) != len(cands):
            raise ValueError("candidate_descriptions must align with candidates")
        ctx = [_context_line(c, d) for c, d in zip(cands, descs)]
        lines += ["", "## Candidate Answers with Contextual Retrieval:"] + ctx
        prov += [x for x, d in zip(ctx, descs) if d]
    return lines, prov, tuple(cands)


def _reasoning(s: _Slots, contextual: bool):
    sentence = task_sentence(s["known"], s["relation"], s["missing"])
    fmt = f"using the format {LIST_FORMAT} and please start your response with '{ANSWER_PREFIX}'."
    if contextual:
        paragraph = s["paragraph"]
        material = f"Here are some materials for you to refer to. {s['known']}: {paragraph}"
        body = ["## Context-aware Reasoning:", "", material, "",
                f"{sentence} Output all the possible answers you can find in the materials {fmt} "
                "Do not output anything except the possible answers. "
                "If you cannot find any answer, please output some possible answers based on your own knowledge."]
        prov = [f"{s['known']}: {paragraph}"]
    else:
        body = ["## Reasoning:", "",
                f"{sentence} Output all some possible answers based on your own knowledge, {fmt} "
                "Do not output anything except the possible answers."]
        prov = []
    return _kgc_header(s) + [""] + body, prov, ()


_SORT_LINE = ("Sort the list to let the candidate answers which are more possible to be the true answer to the "
              f"question prior. Output the sorted order of candidate answers using the format {ORDER_FORMAT} and "
              f"please start your response with '{ORDER_PREFIX}'.")


def _ranking(s: _Slots, contextual: bool):
    cands = list(s["candidates"])
    question = f"{task_sentence(s['known'], s['relation'], s['missing'])} The list of candidate answers is {bracket_list(cands)}."
    if contextual:
        descs = list(s["candidate_descriptions"])
        if len(descs) != len(cands):
            raise ValueError("candidate_descriptions must align with candidates")
        known_line = _context_line(s["known"], s["known_description"])
        ctx = [_context_line(c, d) for c, d in zip(cands, descs)]
        body = ["## Context-aware Re-Ranking:", "", known_line, question, *ctx, _SORT_LINE]
        prov = ([known_line] if s["known_description"] else []) + [x for x, d in zip(ctx, descs) if d]
    else:
        body = ["## Re-Ranking:", "", question, _SORT_LINE]
        prov = []
    return _kgc_header(s) + [""] + body, prov, tuple(cands)


# ---------------------------------------------------------------- KGQA

def load_reasoning_shots() -> list[dict]:
    """Built-in worked examples for the sufficiency prompt."""
    text = resources.files("ctxgraph.llm").joinpath("shots/qa_reasoning.json").read_text(encoding="utf-8")
    return json.loads(text)


def _numbered(items: Sequence[str]) -> list[str]:
    return [f"{i}. {item}" for i, item in enumerate(items, start=1)]


def _qa_topic(s: _Slots):
    lines = [f"## Question: {s['question']}", "",
             "List the entities mentioned in the question that the answer is connected to, using the format "
             f"'[entity1, entity2, ..., entityN]' and please start your response with '{TOPIC_PREFIX}'."]
    return lines, [], ()


def _qa_select_queries(s: _Slots):
    queries = list(s["queries"])
    width = int(s["width"])
    lines = [f"## Question: {s['question']}", "", f"## Current reasoning path: {s['path'] or '(start)'}", "",
             "## Candidate queries:", *_numbered(queries), "",
             f"Select at most {width} queries that are the most relevant to answering the question. Output their "
             f"numbers using the format '[i, j, ...]' and please start your response with '{QUERY_PREFIX}'."]
    return lines, [], (), len(queries)


def _qa_select_triples(s: _Slots):
    triples = list(s["triples"])
    contexts = list(s["contexts"])
    if len(contexts) != len(triples):
        raise ValueError("contexts must align with triples")
    width = int(s["width"])
    lines = [f"## Question: {s['question']}", "", f"## Query: {s['query']}", "", "## Candidate triples:"]
    prov = []
    for i, (tr, ctx) in enumerate(zip(triples, contexts), start=1):
        lines.append(f"{i}. {tr}")
        for sent in ctx:
            lines.append(f"   - {sent}")
            prov.append(sent)
    lines += ["", f"Select at most {width} triples that are the most relevant to answering the question. Output "
              f"their numbers using the format '[i, j, ...]' and please start your response with '{TRIPLE_PREFIX}'."]
    return lines, prov, (), len(triples)


def _knowledge_block(s: _Slots) -> tuple[list[str], list[str]]:
    paths = list(s["paths"])
    contexts = list(s["contexts"])
    lines = ["## Reasoning paths:"] + (paths or ["(none)"]) + ["", "## Contexts:"] + (contexts or ["(none)"])
    return lines, contexts


def _shot_lines(shots: Sequence[Mapping]) -> list[str]:
    lines = []
    for i, shot in enumerate(shots, start=1):
        lines += [f"## Example {i}", f"Question: {shot['question']}", "Reasoning paths:", *shot["paths"],
                  "Contexts:", *shot["contexts"], f"Answer: {shot['answer']}", ""]
    return lines


_SUFFICIENCY_RULE = (
    f"Decide whether the reasoning paths and contexts are sufficient to answer the question. Start your response "
    f"with '{SUFFICIENT_PREFIX} Yes' or '{SUFFICIENT_PREFIX} No'. If Yes, continue on a new line with "
    f"'{ANSWER_PREFIX}' followed by the answers using the format {LIST_FORMAT}.")


def _qa_reason(s: _Slots):
    shots = s.get("shots")
    if shots is None:
        shots = load_reasoning_shots()
    block, prov = _knowledge_block(s)
    lines = [_SUFFICIENCY_RULE, ""] + _shot_lines(shots) + [f"## Question: {s['question']}", ""] + block + [
        "", _SUFFICIENCY_RULE]
    return lines, prov, ()


def _qa_forced(s: _Slots):
    block, prov = _knowledge_block(s)
    lines = [f"## Question: {s['question']}", ""] + block + [
        "", "Using the reasoning paths, the contexts and your own knowledge, output the most likely answers using "
            f"the format {LIST_FORMAT} and please start your response with '{ANSWER_PREFIX}'."]
    return lines, prov, ()


_Renderer = Callable[[_Slots], tuple]

TEMPLATES: dict[str, tuple[_Renderer, str, str]] = {
    "kgc.retrieval": (lambda s: _retrieval(s, False), ANSWERS, ANSWER_PREFIX),
    "kgc.retrieval.contextual": (lambda s: _retrieval(s, True), ANSWERS, ANSWER_PREFIX),
    "kgc.reasoning": (lambda s: _reasoning(s, False), ANSWERS, ANSWER_PREFIX),
    "kgc.reasoning.contextual": (lambda s: _reasoning(s, True), ANSWERS, ANSWER_PREFIX),
    "kgc.ranking": (lambda s: _ranking(s, False), FINAL_ORDER, ORDER_PREFIX),
    "kgc.ranking.contextual": (lambda s: _ranking(s, True), FINAL_ORDER, ORDER_PREFIX),
    "qa.topic": (_qa_topic, ANSWERS, TOPIC_PREFIX),
    "qa.select_queries": (_qa_select_queries, QUERY_SELECTION, QUERY_PREFIX),
    "qa.select_triples": (_qa_select_triples, QUERY_SELECTION, TRIPLE_PREFIX),
    "qa.reason": (_qa_reason, SUFFICIENCY, ANSWER_PREFIX),
    "qa.forced": (_qa_forced, ANSWERS, ANSWER_PREFIX),
}


def render(template_id: str, slots: Mapping[str, Any], vocabulary: Collection[str] | None = None) -> PromptBundle:
    """Fill a template. A missing slot raises :class:`MissingSlotError` naming it.

    ``kgc.reasoning.contextual`` with an empty ``paragraph`` renders the
    context-free variant (and reports ``kgc.reasoning`` as its id).
    """
    if template_id not in TEMPLATES:
        raise UnknownTemplateError(template_id)
    s = _Slots(template_id, slots)
    if template_id == "kgc.reasoning.contextual" and not s["paragraph"]:
        template_id = "kgc.reasoning"
    fn, kind, prefix = TEMPLATES[template_id]
    out = fn(s)
    lines, prov, cands = out[:3]
    choices = out[3] if len(out) > 3 else 0
    text = "\n".join(lines) + "\n"
    return PromptBundle(template_id, text, kind, prefix, tuple(prov), tuple(cands), choices, vocabulary)
