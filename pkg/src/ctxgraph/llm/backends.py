"""Language-model backends: a scripted oracle and an HTTP chat-completion client."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx

from .._http import InFlightGate, TokenBucket, api_key_headers
from .parsing import ParsedReply, ReplyParseError, parse_reply
from .templates import ORDER_PREFIX, PromptBundle, bracket_list

log = logging.getLogger(__name__)

ECHO_CANDIDATES = "$ECHO_CANDIDATES"


class LlmBackend(Protocol):
    def generate(self, bundle: PromptBundle) -> str: ...

    def identity(self) -> dict: ...


class TransportError(RuntimeError):
    def __init__(self, message: str, raw: str | None = None):
        self.raw = raw
        super().__init__(message)


class LlmCallError(RuntimeError):
    """Raised by :func:`complete` once retries are exhausted; ``raw`` holds the last reply."""

    def __init__(self, message: str, raw: str | None, attempts: int, cause: Exception):
        self.raw = raw
        self.attempts = attempts
        self.cause = cause
        super().__init__(message)


class LlmTransportError(LlmCallError):
    pass


class LlmParseError(LlmCallError):
    pass


def fingerprint(text: str) -> str:
    return "sha256:" + hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- scripted

Matcher = str | Callable[[PromptBundle], bool]
Reply = str | Callable[[PromptBundle], str]


@dataclass(frozen=True)
class Rule:
    match: Matcher
    reply: Reply

    def matches(self, bundle: PromptBundle) -> bool:
        if callable(self.match):
            return bool(self.match(bundle))
        if self.match.startswith("sha256:"):
            return self.match == fingerprint(bundle.text)
        return self.match in bundle.text


def echo_candidates(bundle: PromptBundle) -> str:
    return f"{ORDER_PREFIX} {bracket_list(bundle.candidates)}"


class ScriptedBackend:
    """Deterministic replies; the first matching rule wins.

    ``match`` is a substring of the prompt, ``"sha256:<hex>"`` for an exact
    prompt fingerprint, or a predicate. The reply ``$ECHO_CANDIDATES`` answers
    a ranking prompt with its candidate list unchanged. Without a match the
    ``default`` reply is used, or :class:`TransportError` is raised.
    """

    def __init__(self, rules: Sequence[Rule] = (), default: Reply | None = None, name: str = "scripted"):
        self.rules = tuple(rules)
        self.default = default
        self.name = name

    @classmethod
    def from_jsonl(cls, path, default: Reply | None = None) -> "ScriptedBackend":
        rules = []
        with Path(path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    rules.append(Rule(str(rec["match"]), str(rec["reply"])))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad script line ({exc})") from None
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        return cls(rules, default, name=f"scripted:{digest[:16]}")

    @staticmethod
    def _materialize(reply: Reply, bundle: PromptBundle) -> str:
        if callable(reply):
            return reply(bundle)
        if reply == ECHO_CANDIDATES:
            return echo_candidates(bundle)
        return reply

    def generate(self, bundle: PromptBundle) -> str:
        for rule in self.rules:
            if rule.matches(bundle):
                return self._materialize(rule.reply, bundle)
        if self.default is not None:
            return self._materialize(self.default, bundle)
        raise TransportError(f"no scripted reply for prompt {fingerprint(bundle.text)} ({bundle.template_id})")

    def identity(self) -> dict:
        return {"kind": "scripted", "name": self.name, "rules": len(self.rules)}


# ---------------------------------------------------------------- http

class HttpBackend:
    """OpenAI-compatible ``/chat/completions`` client.

    Requests are bounded by an in-flight window (``max_in_flight``) and an
    optional token-bucket rate limit. ``preamble`` messages of a bundle are
    sent as earlier user turns.
    """

    def __init__(self, endpoint: str, model: str, max_tokens: int = 256, temperature: float = 0.0,
                 api_key_env: str | None = "CTXGRAPH_LLM_API_KEY", max_in_flight: int = 4,
                 requests_per_second: float | None = None, timeout: float = 60.0,
                 client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.model = model
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.api_key_env = api_key_env
        self.gate = InFlightGate(max_in_flight)
        self.bucket = TokenBucket(requests_per_second, burst=max_in_flight) if requests_per_second else None
        self._client = client or httpx.Client(timeout=timeout)

    def payload(self, bundle: PromptBundle) -> dict:
        messages = [{"role": "user", "content": m} for m in bundle.preamble]
        messages.append({"role": "user", "content": bundle.text})
        return {"model": self.model, "messages": messages, "temperature": self.temperature,
                "max_tokens": self.max_tokens}

    def generate(self, bundle: PromptBundle) -> str:
        if self.bucket:
            self.bucket.acquire()
        with self.gate.slot():
            try:
                resp = self._client.post(self.endpoint, json=self.payload(bundle), headers=api_key_headers(self.api_key_env))
            except httpx.HTTPError as exc:
                raise TransportError(f"request to {self.endpoint} failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"{self.endpoint} answered HTTP {resp.status_code}", raw=resp.text)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise TransportError("unexpected chat-completion response shape", raw=resp.text) from None

    def identity(self) -> dict:
        return {"kind": "http", "endpoint": self.endpoint, "model": self.model, "max_tokens": self.max_tokens,
                "temperature": self.temperature}


# ---------------------------------------------------------------- complete

def complete(backend: LlmBackend, bundle: PromptBundle, retries: int = 2) -> ParsedReply:
    """Generate and parse, retrying up to ``retries`` more times on either kind of failure."""
    if retries < 0:
        raise ValueError("retries must be >= 0")
    raw = None
    last: Exception | None = None
    for attempt in range(1, retries + 2):
        try:
            raw = backend.generate(bundle)
        except TransportError as exc:
            last = exc
            raw = exc.raw
            log.warning("%s: transport failure on attempt %d: %s", bundle.template_id, attempt, exc)
            continue
        try:
            return parse_reply(bundle, raw)
        except ReplyParseError as exc:
            last = exc
            log.info("%s: unparseable reply on attempt %d: %s", bundle.template_id, attempt, exc.reason)
    attempts = retries + 1
    if isinstance(last, ReplyParseError):
        raise LlmParseError(f"{bundle.template_id}: {last}", raw, attempts, last)
    raise LlmTransportError(f"{bundle.template_id}: {last}", raw, attempts, last)
