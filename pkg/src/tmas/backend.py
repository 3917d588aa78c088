"""Chat-completion backends: a strict scripted replayer and a live HTTP client.

Both enforce the same in-flight budget and return the same result type, so
the orchestrator cannot tell them apart. Scripted entries are keyed by
(role_tag, match key) where the match key is either a SHA-256 of the rendered
prompt ("sha256:<hex>") or an explicit per-role sequence number ("seq:<n>")
assigned deterministically by the caller; arrival order never matters, so
concurrent scripted runs stay reproducible.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

import requests

from .errors import ParseError, SchemaError, ScriptMatchError, TransportError

ENDPOINT_ENV = "TMAS_ENDPOINT"
API_KEY_ENV = "TMAS_API_KEY"
MODEL_ENV = "TMAS_MODEL"


class RoleTag(str, Enum):
    SOLUTION = "solution"
    VERIFICATION = "verification"
    SUMMARY = "summary"
    EXPERIENCE = "experience"
    GUIDELINE = "guideline"
    JUDGE = "judge"
    NOVELTY_JUDGE = "novelty_judge"


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH_CAPPED = "length_capped"


@dataclass(frozen=True)
class CompletionRequest:
    system_prompt: str
    user_prompt: str
    role_tag: RoleTag
    temperature: float = 1.0
    top_p: float = 0.95
    max_output_tokens: int = 131072
    sequence: int | None = None

    def __post_init__(self) -> None:
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("prompts must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")

    def prompt_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.system_prompt.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(self.user_prompt.encode("utf-8"))
        return digest.hexdigest()


@dataclass(frozen=True)
class CompletionResult:
    text: str
    finish_reason: FinishReason
    latency_ms: float
    attempt_count: int


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    backoff_base_ms: int = 500
    backoff_cap_ms: int = 30_000


class CompletionBackend:
    """Base class: enforces the process-wide in-flight budget and tracks a peak."""

    def __init__(self, max_in_flight: int = 8):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.max_in_flight = max_in_flight
        self._slots = threading.Semaphore(max_in_flight)
        self._gauge_lock = threading.Lock()
        self._in_flight = 0
        self.peak_in_flight = 0

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._slots:
            with self._gauge_lock:
                self._in_flight += 1
                self.peak_in_flight = max(self.peak_in_flight, self._in_flight)
            try:
                return self._serve(request)
            finally:
                with self._gauge_lock:
                    self._in_flight -= 1

    def _serve(self, request: CompletionRequest) -> CompletionResult:
        raise NotImplementedError

    def describe(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class ScriptEntry:
    role_tag: RoleTag
    key: str
    response: str
    finish_reason: FinishReason = FinishReason.STOP
    fail: str | None = None  # "transport" or "schema" simulates a terminal failure

    def __post_init__(self) -> None:
        if not (self.key.startswith("seq:") or self.key.startswith("sha256:")):
            raise ValueError(f"key must start with 'seq:' or 'sha256:', got {self.key!r}")
        if self.key.startswith("seq:"):
            tail = self.key[len("seq:"):]
            if not tail.isdigit():
                raise ValueError(f"seq key must be a non-negative integer, got {self.key!r}")
        if self.fail not in (None, "transport", "schema"):
            raise ValueError(f"fail must be 'transport' or 'schema', got {self.fail!r}")


def load_script(path: str | Path) -> list[ScriptEntry]:
    """Load script entries from JSONL; duplicates and bad records are errors."""
    path = Path(path)
    entries: list[ScriptEntry] = []
    seen: set[tuple[RoleTag, str]] = set()
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc}", path=str(path), line=line_no) from exc
            if not isinstance(data, dict):
                raise ParseError("entry must be an object", path=str(path), line=line_no)
            missing = {"role_tag", "key", "response"} - set(data)
            if missing:
                raise ParseError(f"missing fields {sorted(missing)}", path=str(path), line=line_no)
            try:
                role = RoleTag(data["role_tag"])
            except ValueError as exc:
                raise ParseError(f"unknown role_tag {data['role_tag']!r}", path=str(path), line=line_no) from exc
            try:
                entry = ScriptEntry(
                    role_tag=role,
                    key=data["key"],
                    response=data["response"],
                    finish_reason=FinishReason(data.get("finish_reason", "stop")),
                    fail=data.get("fail"),
                )
            except ValueError as exc:
                raise ParseError(str(exc), path=str(path), line=line_no) from exc
            pair = (entry.role_tag, entry.key)
            if pair in seen:
                raise ParseError(
                    f"duplicate entry for ({role.value}, {entry.key})", path=str(path), line=line_no
                )
            seen.add(pair)
            entries.append(entry)
    return entries


@dataclass(frozen=True)
class RequestRecord:
    """Instrumentation row kept by ScriptedBackend for assertions in tests."""

    role_tag: RoleTag
    sequence: int | None
    prompt_hash: str
    system_prompt: str
    user_prompt: str


class ScriptedBackend(CompletionBackend):
    """Replays canned responses; every request must match exactly one entry."""

    def __init__(self, entries: Iterable[ScriptEntry], max_in_flight: int = 8):
        super().__init__(max_in_flight=max_in_flight)
        self._entries: dict[tuple[RoleTag, str], ScriptEntry] = {}
        for entry in entries:
            pair = (entry.role_tag, entry.key)
            if pair in self._entries:
                raise ParseError(f"duplicate entry for ({entry.role_tag.value}, {entry.key})")
            self._entries[pair] = entry
        self._log_lock = threading.Lock()
        self.request_log: list[RequestRecord] = []

    @classmethod
    def from_file(cls, path: str | Path, max_in_flight: int = 8) -> ScriptedBackend:
        return cls(load_script(path), max_in_flight=max_in_flight)

    def _serve(self, request: CompletionRequest) -> CompletionResult:
        with self._log_lock:
            self.request_log.append(
                RequestRecord(
                    role_tag=request.role_tag,
                    sequence=request.sequence,
                    prompt_hash=request.prompt_hash(),
                    system_prompt=request.system_prompt,
                    user_prompt=request.user_prompt,
                )
            )
        matches = []
        hash_key = (request.role_tag, f"sha256:{request.prompt_hash()}")
        if hash_key in self._entries:
            matches.append(self._entries[hash_key])
        if request.sequence is not None:
            seq_key = (request.role_tag, f"seq:{request.sequence}")
            if seq_key in self._entries:
                matches.append(self._entries[seq_key])
        if not matches:
            raise ScriptMatchError(
                f"no script entry for role={request.role_tag.value} "
                f"sequence={request.sequence} hash={request.prompt_hash()[:12]}"
            )
        if len(matches) > 1:
            raise ScriptMatchError(
                f"ambiguous script entries for role={request.role_tag.value} "
                f"sequence={request.sequence}"
            )
        entry = matches[0]
        if entry.fail == "transport":
            raise TransportError(f"scripted transport failure for {entry.key}")
        if entry.fail == "schema":
            raise SchemaError(f"scripted schema failure for {entry.key}")
        return CompletionResult(
            text=entry.response,
            finish_reason=entry.finish_reason,
            latency_ms=0.0,
            attempt_count=1,
        )

    def describe(self) -> str:
        digest = hashlib.sha256()
        for (role, key), entry in sorted(self._entries.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
            digest.update(f"{role.value}\x00{key}\x00{entry.response}\x01".encode("utf-8"))
        return f"script:{digest.hexdigest()[:16]}"


class LiveBackend(CompletionBackend):
    """HTTP client for any endpoint speaking the common chat-completion format.

    Retries connection errors, HTTP 429, and HTTP 5xx with exponential backoff
    and full jitter; any other 4xx is terminal. A truncated completion (finish
    reason "length") is returned as LENGTH_CAPPED, never retried.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        model: str | None = None,
        retry: RetryPolicy = RetryPolicy(),
        max_in_flight: int = 8,
        timeout_s: float = 600.0,
        session: requests.Session | None = None,
        sleeper=time.sleep,
    ):
        super().__init__(max_in_flight=max_in_flight)
        if not endpoint:
            raise ValueError("endpoint must be non-empty")
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self.retry = retry
        self.timeout_s = timeout_s
        self._session = session or requests.Session()
        self._sleep = sleeper

    @classmethod
    def from_env(cls, environ, **kwargs) -> LiveBackend:
        endpoint = environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise TransportError(f"{ENDPOINT_ENV} is not set")
        return cls(
            endpoint=endpoint,
            api_key=environ.get(API_KEY_ENV),
            model=environ.get(MODEL_ENV),
            **kwargs,
        )

    def _payload(self, request: CompletionRequest) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_output_tokens,
        }
        if self.model:
            payload["model"] = self.model
        return payload

    def _parse_response(self, data: Any) -> tuple[str, FinishReason]:
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"]
            finish = choice.get("finish_reason")
        except (KeyError, IndexError, TypeError) as exc:
            raise SchemaError(f"malformed completion payload: {exc!r}") from exc
        if not isinstance(text, str):
            raise SchemaError("completion content is not a string")
        reason = FinishReason.LENGTH_CAPPED if finish == "length" else FinishReason.STOP
        return text, reason

    def _serve(self, request: CompletionRequest) -> CompletionResult:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        started = time.monotonic()
        last_error = "no attempts made"
        for attempt in range(1, self.retry.max_attempts + 1):
            try:
                response = self._session.post(
                    self.endpoint,
                    json=self._payload(request),
                    headers=headers,
                    timeout=self.timeout_s,
                )
            except requests.RequestException as exc:
                last_error = f"transport: {exc}"
            else:
                if response.status_code == 200:
                    try:
                        data = response.json()
                    except ValueError as exc:
                        raise SchemaError(f"endpoint returned non-JSON body: {exc}") from exc
                    text, reason = self._parse_response(data)
                    latency_ms = (time.monotonic() - started) * 1000.0
                    return CompletionResult(
                        text=text,
                        finish_reason=reason,
                        latency_ms=latency_ms,
                        attempt_count=attempt,
                    )
                if response.status_code != 429 and 400 <= response.status_code < 500:
                    raise TransportError(
                        f"HTTP {response.status_code} from endpoint (terminal): "
                        f"{response.text[:200]}"
                    )
                last_error = f"HTTP {response.status_code}"
            if attempt < self.retry.max_attempts:
                base = self.retry.backoff_base_ms * (2 ** (attempt - 1))
                delay_ms = min(base, self.retry.backoff_cap_ms) * random.random()
                self._sleep(delay_ms / 1000.0)
        raise TransportError(
            f"giving up after {self.retry.max_attempts} attempts; last error: {last_error}"
        )

    def describe(self) -> str:
        suffix = f" model={self.model}" if self.model else ""
        return f"live:{self.endpoint}{suffix}"
