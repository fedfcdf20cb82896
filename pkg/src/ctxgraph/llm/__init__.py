"""Prompt rendering, reply parsing and model backends."""
from .backends import (ECHO_CANDIDATES, HttpBackend, LlmBackend, LlmCallError, LlmParseError, LlmTransportError,
                       Rule, ScriptedBackend, TransportError, complete, fingerprint)
from .parsing import ParsedReply, ReplyParseError, parse_reply, split_items
from .templates import (ANSWER_PREFIX, ORDER_PREFIX, TEMPLATES, MissingSlotError, PromptBundle, question_text,
                        relation_phrase, render, task_sentence)

__all__ = [
    "ANSWER_PREFIX", "ECHO_CANDIDATES", "HttpBackend", "LlmBackend", "LlmCallError", "LlmParseError",
    "LlmTransportError", "MissingSlotError", "ORDER_PREFIX", "ParsedReply", "PromptBundle", "ReplyParseError",
    "Rule", "ScriptedBackend", "TEMPLATES", "TransportError", "complete", "fingerprint", "parse_reply",
    "question_text", "relation_phrase", "render", "split_items", "task_sentence",
]
