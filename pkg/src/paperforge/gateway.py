"""LLM gateway: every agent issues prompts and receives structured replies here.

A :class:`ChatRequest` names one of the registered reply schemas; the
gateway re-prompts with a repair instruction when the model returns
malformed output, and retries with exponential backoff on transient
transport failures. The :class:`MockBackend` replays scripted replies so
every control-flow path is testable and fully deterministic.
"""

from __future__ import annotations

import json
import logging
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import requests

logger = logging.getLogger(__name__)

# Base URL / credentials come from these environment variables unless the
# backend is constructed with explicit values.
API_BASE_ENV = "FRAME_API_BASE"
API_KEY_ENV = "FRAME_API_KEY"

DEFAULT_MAX_ATTEMPTS = 3
DEFAULT_IN_FLIGHT_CAP = 4

# Judging roles default to deterministic decoding; generative roles keep
# some temperature so refinement rounds are not forced identical.
JUDGE_TEMPERATURE = 0.0
GENERATE_TEMPERATURE = 0.7


class GatewayError(Exception):
    """Base class for gateway failures."""


class BackendUnavailable(GatewayError):
    """Transport failure persisted after the retry budget."""


class RateLimited(GatewayError):
    """Rate limiting persisted after the retry budget."""


class SchemaViolation(GatewayError):
    """Every attempt produced output that failed schema validation."""


class UnmatchedRequest(GatewayError):
    """No scripted matcher covers a request sent to the mock backend."""


class ScriptExhausted(GatewayError):
    """A matcher matched but its scripted replies were used up."""


@dataclass
class ChatRequest:
    """One logical prompt sent through the gateway."""

    role_preamble: str
    task_body: str
    expected_schema: str
    temperature: float = 0.0
    max_attempts: int = DEFAULT_MAX_ATTEMPTS

    def __post_init__(self) -> None:
        if self.expected_schema not in REPLY_SCHEMAS:
            raise ValueError(f"unknown reply schema: {self.expected_schema!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be positive")


@dataclass
class ChatReply:
    """Validated reply for one logical request."""

    parsed_payload: Any
    raw_text: str
    attempt_count: int


# ---------------------------------------------------------------------------
# Reply schemas


def _require_str(value: Any, what: str) -> str:
    if not isinstance(value, str) or not value.strip():
        raise ValueError(f"{what} must be a non-empty string")
    return value


def _validate_score_report(payload: Any) -> dict:
    """{"score": number, "reason": text} with optional "suggestions"."""
    if not isinstance(payload, dict):
        raise ValueError("score report must be a JSON object")
    score = payload.get("score")
    if not isinstance(score, (int, float)) or isinstance(score, bool):
        raise ValueError("score must be a number")
    _require_str(payload.get("reason"), "reason")
    if "suggestions" in payload and not isinstance(payload["suggestions"], str):
        raise ValueError("suggestions must be a string")
    return payload


def _validate_single_text(payload: Any) -> dict:
    """Exactly one key whose value is a non-empty string."""
    if not isinstance(payload, dict) or len(payload) != 1:
        raise ValueError("payload must be a JSON object with a single key")
    ((key, value),) = payload.items()
    _require_str(value, f"value of {key!r}")
    return payload


def _validate_reflection(payload: Any) -> dict:
    """{"suggestions": {dimension: [items...]}} with optional "analysis"."""
    if not isinstance(payload, dict):
        raise ValueError("reflection must be a JSON object")
    suggestions = payload.get("suggestions")
    if not isinstance(suggestions, dict) or not suggestions:
        raise ValueError("reflection must carry a non-empty 'suggestions' object")
    for dim, items in suggestions.items():
        if isinstance(items, str):
            continue
        if not isinstance(items, list) or not all(isinstance(i, str) for i in items):
            raise ValueError(f"suggestions for {dim!r} must be a string or list of strings")
    if "analysis" in payload and not isinstance(payload["analysis"], str):
        raise ValueError("analysis must be a string")
    return payload


def _validate_filter_verdict(payload: Any) -> dict:
    """{"verdict": "keep"|"drop", "reason": text}."""
    if not isinstance(payload, dict):
        raise ValueError("filter verdict must be a JSON object")
    verdict = payload.get("verdict")
    if not isinstance(verdict, str) or verdict.strip().lower() not in ("keep", "drop"):
        raise ValueError("verdict must be 'keep' or 'drop'")
    _require_str(payload.get("reason"), "reason")
    return payload


def _validate_integration(payload: Any) -> dict:
    """{"guidance": text}."""
    if not isinstance(payload, dict):
        raise ValueError("integration must be a JSON object")
    _require_str(payload.get("guidance"), "guidance")
    return payload


REPLY_SCHEMAS: dict[str, Callable[[Any], dict]] = {
    "score_report": _validate_score_report,
    "extraction": _validate_single_text,
    "generation": _validate_single_text,
    "reflection": _validate_reflection,
    "filter_verdict": _validate_filter_verdict,
    "integration": _validate_integration,
}

_FENCE_RE = re.compile(r"```(?:json)?\s*\n?(.*?)```", re.DOTALL)


def parse_reply_text(raw: str, schema: str) -> dict:
    """Parse raw model output into a schema-validated payload.

    Tolerates markdown fences and leading/trailing prose around the JSON
    object. Raises ValueError when no valid payload can be recovered.
    """
    text = raw.strip()
    fenced = _FENCE_RE.search(text)
    if fenced:
        text = fenced.group(1).strip()
    candidates = [text]
    start, end = text.find("{"), text.rfind("}")
    if start != -1 and end > start:
        candidates.append(text[start : end + 1])
    last_error: Exception | None = None
    for candidate in candidates:
        try:
            payload = json.loads(candidate)
        except json.JSONDecodeError as exc:
            last_error = exc
            continue
        return REPLY_SCHEMAS[schema](payload)
    raise ValueError(f"no parseable JSON payload: {last_error}")


# ---------------------------------------------------------------------------
# Backends

_REPAIR_INSTRUCTION = (
    "\n\n[Repair] Your previous reply could not be used: {error}. "
    "Respond again with ONLY a valid JSON object in the required format, "
    "with no surrounding text or markdown fences."
)


class HttpBackend:
    """OpenAI-compatible chat-completions backend.

    POSTs ``{base}/v1/chat/completions`` with a bearer token. An in-flight
    semaphore bounds concurrent remote calls so batch runs stay polite.
    """

    name = "http"

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str = "gpt-4o-mini",
        timeout: float = 60.0,
        in_flight_cap: int = DEFAULT_IN_FLIGHT_CAP,
    ) -> None:
        import os

        self.base_url = (base_url or os.environ.get(API_BASE_ENV, "")).rstrip("/")
        self.api_key = api_key or os.environ.get(API_KEY_ENV, "")
        self.model = model
        self.timeout = timeout
        self._gate = threading.Semaphore(in_flight_cap)
        if not self.base_url:
            raise BackendUnavailable(
                f"no API base configured: set {API_BASE_ENV} or pass base_url"
            )

    def send(self, request: ChatRequest, body: str) -> str:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.role_preamble},
                {"role": "user", "content": body},
            ],
            "temperature": request.temperature,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        with self._gate:
            try:
                response = requests.post(
                    f"{self.base_url}/v1/chat/completions",
                    json=payload,
                    headers=headers,
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                raise BackendUnavailable(str(exc)) from exc
        if response.status_code == 429:
            raise RateLimited(f"rate limited: {response.text[:200]}")
        if response.status_code >= 500:
            raise BackendUnavailable(f"server error {response.status_code}")
        if response.status_code != 200:
            raise GatewayError(f"unexpected status {response.status_code}: {response.text[:200]}")
        data = response.json()
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed completion envelope: {exc}") from exc


@dataclass
class _ScriptEntry:
    matcher: Callable[[ChatRequest], bool]
    replies: list[Any]
    cycle: bool = False
    position: int = 0
    description: str = ""

    def next_reply(self) -> Any:
        if self.position >= len(self.replies):
            if not self.cycle:
                raise ScriptExhausted(
                    f"script entry {self.description or 'matcher'} exhausted "
                    f"after {len(self.replies)} replies"
                )
            self.position = 0
        reply = self.replies[self.position]
        self.position += 1
        return reply


class MockBackend:
    """Deterministic scripted backend for tests and CLI dry runs.

    Matchers are checked in registration order; the first match consumes the
    next reply from its list. Consumption is serialized under a lock so
    ordering stays deterministic even with worker threads.
    """

    name = "mock"
    retry_base_delay = 0.0

    def __init__(self) -> None:
        self._entries: list[_ScriptEntry] = []
        self._lock = threading.Lock()
        self.requests: list[tuple[ChatRequest, str]] = []

    def script(
        self,
        matcher: Callable[[ChatRequest], bool],
        replies: list[Any],
        cycle: bool = False,
        description: str = "",
    ) -> None:
        """Register a matcher with an ordered list of replies.

        A reply may be a raw string, a dict (sent as its JSON dump), or
        ``{"error": "unavailable"|"rate_limited"}`` to script a transport
        failure for that attempt.
        """
        self._entries.append(
            _ScriptEntry(matcher=matcher, replies=list(replies), cycle=cycle, description=description)
        )

    def send(self, request: ChatRequest, body: str) -> str:
        with self._lock:
            self.requests.append((request, body))
            for entry in self._entries:
                if entry.matcher(request):
                    reply = entry.next_reply()
                    break
            else:
                raise UnmatchedRequest(
                    f"no matcher for request (schema={request.expected_schema}, "
                    f"preamble={request.role_preamble[:60]!r})"
                )
        if isinstance(reply, dict):
            if "error" in reply:
                kind = reply["error"]
                if kind == "rate_limited":
                    raise RateLimited("scripted rate limit")
                raise BackendUnavailable(f"scripted transport failure: {kind}")
            return json.dumps(reply, ensure_ascii=False)
        return str(reply)

    def sent_requests(self, contains: str = "") -> list[tuple[ChatRequest, str]]:
        """Captured (request, body) pairs whose preamble contains ``contains``."""
        return [
            (req, body)
            for req, body in self.requests
            if contains in req.role_preamble
        ]

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        """Load a declarative script: a JSON list of matcher/replies entries.

        Each entry looks like::

            {"match": {"role_contains": "...", "body_contains": "...",
                       "schema": "..."},
             "replies": [...], "cycle": false}
        """
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(spec, list):
            raise ValueError("mock script must be a JSON list of entries")
        backend = cls()
        for index, entry in enumerate(spec):
            match = entry.get("match", {})
            backend.script(
                _declarative_matcher(match),
                entry.get("replies", []),
                cycle=bool(entry.get("cycle", False)),
                description=entry.get("name", f"entry {index}"),
            )
        return backend


def _declarative_matcher(match: dict) -> Callable[[ChatRequest], bool]:
    role_sub = match.get("role_contains")
    body_sub = match.get("body_contains")
    schema = match.get("schema")

    def predicate(request: ChatRequest) -> bool:
        if role_sub is not None and role_sub not in request.role_preamble:
            return False
        if body_sub is not None and body_sub not in request.task_body:
            return False
        if schema is not None and request.expected_schema != schema:
            return False
        return True

    return predicate


def script_mock(
    backend: MockBackend,
    matcher: Callable[[ChatRequest], bool],
    replies: list[Any],
    cycle: bool = False,
) -> None:
    """Functional alias for :meth:`MockBackend.script`."""
    backend.script(matcher, replies, cycle=cycle)


# ---------------------------------------------------------------------------
# The single entry point agents call


def complete(request: ChatRequest, backend: Any, rng: random.Random | None = None) -> ChatReply:
    """Send a request and return a schema-validated reply.

    Malformed output triggers a re-prompt carrying a repair instruction;
    transient transport errors back off exponentially with jitter. Either
    way the total attempt budget is ``request.max_attempts``.
    """
    rng = rng or random
    body = request.task_body
    base_delay = getattr(backend, "retry_base_delay", 1.0)
    last_schema_error: Exception | None = None
    last_transport_error: GatewayError | None = None
    for attempt in range(1, request.max_attempts + 1):
        try:
            raw = backend.send(request, body)
        except (BackendUnavailable, RateLimited) as exc:
            last_transport_error = exc
            if attempt < request.max_attempts:
                delay = base_delay * min(2.0 ** (attempt - 1), 30.0) * (0.5 + rng.random() / 2)
                logger.warning(
                    "transport failure (attempt %d/%d), retrying in %.1fs: %s",
                    attempt, request.max_attempts, delay, exc,
                )
                time.sleep(delay)
            continue
        try:
            payload = parse_reply_text(raw, request.expected_schema)
        except ValueError as exc:
            last_schema_error = exc
            logger.warning(
                "unparseable reply (attempt %d/%d): %s", attempt, request.max_attempts, exc
            )
            body = request.task_body + _REPAIR_INSTRUCTION.format(error=exc)
            continue
        return ChatReply(parsed_payload=payload, raw_text=raw, attempt_count=attempt)
    if last_schema_error is not None:
        raise SchemaViolation(
            f"all {request.max_attempts} attempts failed validation: {last_schema_error}"
        )
    assert last_transport_error is not None
    raise last_transport_error
