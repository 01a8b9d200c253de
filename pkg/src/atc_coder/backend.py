"""Chat-completion backends.

``HttpChatBackend`` talks to any server exposing the OpenAI-style
``/chat/completions`` route (hosted APIs, vLLM, llama.cpp, TGI...).
``OracleBackend`` and ``AdversarialBackend`` are offline stand-ins used to
exercise the pipeline without a model.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass
from typing import Literal

import httpx

from .errors import BackendError, OracleMiss, ScriptExhausted, ServerError, TransportError
from .ontology import AtcCode, parse_code
from .prompts import parse_user_prompt

logger = logging.getLogger(__name__)

Role = Literal["system", "user", "assistant"]
ROLES: tuple[str, ...] = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.content:
            raise ValueError("message content must be non-empty")

    def to_dict(self) -> dict[str, str]:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.1
    seed: int = 42
    max_output_tokens: int = 64
    model_id: str = "default"

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class ChatBackend:
    """Base class. Subclasses implement :meth:`_reply`; callers use :meth:`complete`."""

    kind = "abstract"

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams) -> str:
        if not messages:
            raise ValueError("messages must be non-empty")
        if messages[0].role != "system":
            raise ValueError("first message must have the system role")
        return self._reply(tuple(messages), params)

    def _reply(self, messages: tuple[ChatMessage, ...], params: GenerationParams) -> str:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def complete(backend: ChatBackend, messages: Sequence[ChatMessage], params: GenerationParams) -> str:
    return backend.complete(messages, params)


RETRY_STATUS = frozenset({429, 500, 502, 503, 504})


class HttpChatBackend(ChatBackend):
    """Client for an OpenAI-compatible chat-completions endpoint.

    The bearer token is read from the environment variable named by
    ``token_env`` on every request; it is never stored on the instance.
    """

    kind = "http"

    def __init__(
        self,
        base_url: str,
        token_env: str | None = None,
        *,
        max_attempts: int = 3,
        backoff_initial: float = 1.0,
        max_in_flight: int = 8,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.token_env = token_env
        self.max_attempts = max_attempts
        self.backoff_initial = backoff_initial
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.token_env:
            token = os.environ.get(self.token_env)
            if not token:
                raise BackendError(f"environment variable {self.token_env} is not set")
            headers["Authorization"] = f"Bearer {token}"
        return headers

    @staticmethod
    def request_body(messages: Sequence[ChatMessage], params: GenerationParams) -> dict:
        return {
            "model": params.model_id,
            "messages": [m.to_dict() for m in messages],
            "temperature": params.temperature,
            "seed": params.seed,
            "max_tokens": params.max_output_tokens,
        }

    def _reply(self, messages: tuple[ChatMessage, ...], params: GenerationParams) -> str:
        body = self.request_body(messages, params)
        headers = self._headers()
        delay = self.backoff_initial
        for attempt in range(1, self.max_attempts + 1):
            last = attempt == self.max_attempts
            try:
                with self._slots:
                    resp = self._client.post(self.url, json=body, headers=headers)
            except httpx.TransportError as exc:
                if last:
                    raise TransportError(f"{self.url}: {exc!r} after {attempt} attempts") from exc
                logger.warning("transport error on attempt %d/%d: %r; retrying in %.1fs",
                               attempt, self.max_attempts, exc, delay)
            else:
                if resp.is_success:
                    return _reply_text(resp)
                if resp.status_code not in RETRY_STATUS or last:
                    raise ServerError(resp.status_code, resp.text)
                logger.warning("HTTP %d on attempt %d/%d; retrying in %.1fs",
                               resp.status_code, attempt, self.max_attempts, delay)
            self._sleep(delay)
            delay *= 2
        raise AssertionError("unreachable")


def _reply_text(resp: httpx.Response) -> str:
    try:
        data = resp.json()
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ServerError(resp.status_code, f"malformed completion payload: {resp.text}") from exc
    return content if isinstance(content, str) else ""


def _option_code(line: str) -> str:
    return line.split(":", 1)[0].strip()


ABSTAIN_REPLY = "NONE"


class OracleBackend(ChatBackend):
    """Always picks the option on the path to the gold code of the prompted mention.

    When the gold code is an inner node, prompts below it get ``ABSTAIN_REPLY``,
    which matches no option, so the traversal ends on the gold code itself.
    """

    kind = "oracle"

    def __init__(self, gold: Mapping[str, AtcCode | str]):
        self._gold = {k.strip(): v if isinstance(v, AtcCode) else parse_code(v) for k, v in gold.items()}

    def _reply(self, messages: tuple[ChatMessage, ...], params: GenerationParams) -> str:
        user = next((m for m in messages if m.role == "user"), None)
        if user is None:
            raise OracleMiss("no user message")
        try:
            mention, _level, options = parse_user_prompt(user.content)
        except ValueError as exc:
            raise OracleMiss(f"unrecognized prompt: {exc}") from exc
        gold = self._gold.get(mention.strip())
        if gold is None:
            raise OracleMiss(f"no gold code for mention {mention!r}")
        codes = [_option_code(ln) for ln in options]
        if codes and all(c.startswith(gold.text) and len(c) > len(gold.text) for c in codes):
            # gold path already complete above this level: decline so the traversal stops at gold
            return ABSTAIN_REPLY
        hits = [ln for ln, c in zip(options, codes) if c and gold.text.startswith(c)]
        if len(hits) != 1:
            raise OracleMiss(f"{len(hits)} options on the path to {gold} for {mention!r}")
        return hits[0]


class AdversarialBackend(ChatBackend):
    """Replays a fixed script of replies, one per call, in order.

    With ``cycle=True`` the script wraps around instead of raising
    :class:`ScriptExhausted`.
    """

    kind = "adversarial"

    def __init__(self, script: Sequence[str], *, cycle: bool = False):
        if not script:
            raise ValueError("script must contain at least one reply")
        self._script = list(script)
        self._cycle = cycle
        self._cursor = 0
        self._lock = threading.Lock()
        self.calls = 0

    def _reply(self, messages: tuple[ChatMessage, ...], params: GenerationParams) -> str:
        with self._lock:
            if self._cursor >= len(self._script):
                if not self._cycle:
                    raise ScriptExhausted(f"script of {len(self._script)} replies exhausted")
                self._cursor = 0
            reply = self._script[self._cursor]
            self._cursor += 1
            self.calls += 1
            return reply

