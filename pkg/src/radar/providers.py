"""Chat-completion and text-embedding backends behind one small interface.

Ships three implementations: a scripted provider that replays canned
responses (tests, golden runs), a deterministic hashing embedder, and a
plain HTTP JSON client pair for live model backends.
"""
from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
import requests

from .errors import (
    ConfigError,
    ProviderError,
    ScriptExhaustedError,
    ScriptKeyError,
    ShapeError,
    TransportError,
    ValidationError,
)

ROLES = ("system", "user", "assistant")

# Sampling presets: high favors hypothesis diversity, low keeps answers pinned
# to retrieved text, mid balances the final synthesis. All overridable.
TEMP_HIGH = 1.0
TOP_P_HIGH = 0.95
TEMP_LOW = 0.1
TEMP_MID = 0.5

DEFAULT_EMBED_DIM = 384
DEFAULT_MAX_TOKENS = 1024

RETRY_ATTEMPTS = 3
RETRY_BACKOFF_S = 1.0


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValidationError(f"unknown message role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = TEMP_MID
    top_p: float = 1.0
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValidationError("chat request needs at least one message")
        if self.temperature < 0:
            raise ValidationError(f"temperature must be >= 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValidationError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_tokens <= 0:
            raise ValidationError(f"max_tokens must be positive, got {self.max_tokens}")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    provider_id: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


def user_request(
    text: str,
    *,
    temperature: float = TEMP_MID,
    top_p: float = 1.0,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> ChatRequest:
    """Single user-message request; the common shape for templated prompts."""
    return ChatRequest(
        messages=(ChatMessage("user", text),),
        temperature=temperature,
        top_p=top_p,
        max_tokens=max_tokens,
    )


def request_fingerprint(request: ChatRequest) -> str:
    """Stable digest of a request's messages, used to key scripted responses."""
    h = hashlib.sha256()
    for msg in request.messages:
        h.update(msg.role.encode("utf-8"))
        h.update(b"\x00")
        h.update(msg.content.encode("utf-8"))
        h.update(b"\x01")
    return h.hexdigest()[:16]


class ChatProvider(Protocol):
    provider_id: str

    def complete(self, request: ChatRequest) -> ChatResponse: ...


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


def chat_complete(provider: ChatProvider, request: ChatRequest) -> ChatResponse:
    """Run one chat completion. Transport failures surface as typed errors."""
    if not isinstance(request, ChatRequest):
        raise ValidationError("chat_complete expects a ChatRequest")
    return provider.complete(request)


def embed_text(embedder: Embedder, text: str) -> np.ndarray:
    """Embed non-empty text into the embedder's fixed-dimension vector."""
    if not text:
        raise ValidationError("cannot embed empty text")
    vec = np.asarray(embedder.embed(text), dtype=np.float32).reshape(-1)
    if vec.shape[0] != embedder.dim:
        raise ShapeError(f"embedder returned dim {vec.shape[0]}, expected {embedder.dim}")
    if not np.all(np.isfinite(vec)):
        raise ProviderError("embedder returned non-finite components")
    return vec


# ---------------------------------------------------------------------------
# Scripted provider (tests, golden runs, offline replay)
# ---------------------------------------------------------------------------


class ScriptedChatProvider:
    """Replays canned responses.

    Keyed entries are matched on the request fingerprint and may be replayed
    any number of times; unkeyed entries are consumed once each, in order.
    Replay order is preserved under concurrent callers via an internal lock.
    """

    def __init__(
        self,
        script: Sequence[str] = (),
        keyed: Mapping[str, str] | None = None,
        provider_id: str = "scripted",
    ):
        self.provider_id = provider_id
        self._ordered = list(script)
        self._keyed = dict(keyed or {})
        self._cursor = 0
        self._lock = threading.Lock()
        self.calls = 0

    @property
    def remaining(self) -> int:
        return len(self._ordered) - self._cursor

    def complete(self, request: ChatRequest) -> ChatResponse:
        fp = request_fingerprint(request)
        with self._lock:
            self.calls += 1
            if fp in self._keyed:
                content = self._keyed[fp]
            elif self._cursor < len(self._ordered):
                content = self._ordered[self._cursor]
                self._cursor += 1
            elif self._keyed:
                raise ScriptKeyError(f"no scripted response for fingerprint {fp}")
            else:
                raise ScriptExhaustedError(
                    f"script exhausted after {len(self._ordered)} responses"
                )
        prompt_chars = sum(len(m.content) for m in request.messages)
        return ChatResponse(
            content=content,
            provider_id=self.provider_id,
            prompt_tokens=prompt_chars // 4,
            completion_tokens=len(content) // 4,
        )


def scripted_provider_from_file(path: str | Path) -> ScriptedChatProvider:
    """Load a script file: a JSON array of {fingerprint?: str, content: str}."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read script file {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise ConfigError(f"script file {path} must hold a JSON array")
    ordered: list[str] = []
    keyed: dict[str, str] = {}
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "content" not in entry:
            raise ConfigError(f"script file {path} entry {i} needs a 'content' key")
        content = entry["content"]
        if not isinstance(content, str):
            raise ConfigError(f"script file {path} entry {i} content must be a string")
        if "fingerprint" in entry:
            keyed[str(entry["fingerprint"])] = content
        else:
            ordered.append(content)
    return ScriptedChatProvider(script=ordered, keyed=keyed, provider_id=f"scripted:{path.name}")


# ---------------------------------------------------------------------------
# Deterministic embedder
# ---------------------------------------------------------------------------


class HashingEmbedder:
    """Deterministic text embedder: signed feature hashing of character 3-grams.

    The lowercased text is padded with '##' on both ends, every 3-gram is
    hashed with blake2b, and the digest picks a bucket (first 4 bytes, little
    endian, mod dim) and a sign (low bit of byte 4). The accumulator is then
    L2-normalized. Identical text always maps to an identical unit vector,
    which keeps index code paths the same in tests and live runs.
    """

    def __init__(self, dim: int = DEFAULT_EMBED_DIM):
        if dim <= 0:
            raise ConfigError(f"embedder dim must be positive, got {dim}")
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValidationError("cannot embed empty text")
        padded = f"##{text.lower()}##"
        acc = np.zeros(self.dim, dtype=np.float64)
        for i in range(len(padded) - 2):
            digest = hashlib.blake2b(padded[i : i + 3].encode("utf-8"), digest_size=8).digest()
            bucket = int.from_bytes(digest[:4], "little") % self.dim
            sign = 1.0 if digest[4] & 1 else -1.0
            acc[bucket] += sign
        norm = float(np.linalg.norm(acc))
        if norm == 0.0:  # total sign cancellation; fall back to unsigned counts
            for i in range(len(padded) - 2):
                digest = hashlib.blake2b(padded[i : i + 3].encode("utf-8"), digest_size=8).digest()
                acc[int.from_bytes(digest[:4], "little") % self.dim] += 1.0
            norm = float(np.linalg.norm(acc))
        return (acc / norm).astype(np.float32)


# ---------------------------------------------------------------------------
# Live HTTP backends
# ---------------------------------------------------------------------------


def _post_with_retries(
    session: requests.Session,
    url: str,
    payload: dict,
    *,
    headers: dict[str, str],
    timeout_s: float,
    attempts: int = RETRY_ATTEMPTS,
    backoff_s: float = RETRY_BACKOFF_S,
    sleep: Callable[[float], None] = time.sleep,
) -> dict:
    """POST JSON with bounded retries on transport failures only."""
    last: Exception | None = None
    for attempt in range(attempts):
        if attempt:
            sleep(backoff_s * 2 ** (attempt - 1))
        try:
            resp = session.post(url, json=payload, headers=headers, timeout=timeout_s)
        except requests.RequestException as exc:
            last = exc
            continue
        if resp.status_code >= 500:
            last = TransportError(f"{url} answered {resp.status_code}")
            continue
        if resp.status_code >= 400:
            raise ProviderError(f"{url} answered {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProviderError(f"{url} returned a non-JSON payload") from exc
        if not isinstance(body, dict):
            raise ProviderError(f"{url} returned a non-object payload")
        return body
    raise TransportError(f"{url} unreachable after {attempts} attempts: {last}") from (
        last if isinstance(last, Exception) else None
    )


def _auth_headers(api_key: str | None) -> dict[str, str]:
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    return headers


class HttpChatProvider:
    """Chat completions against one JSON endpoint.

    Wire shape: POST {model?, messages, temperature, top_p, max_tokens} and
    expect {content: str, usage?: {prompt_tokens, completion_tokens}} back.
    Per-model adapters are expected to live behind the endpoint.
    """

    def __init__(
        self,
        url: str,
        *,
        api_key: str | None = None,
        model: str | None = None,
        timeout_s: float = 30.0,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
        provider_id: str | None = None,
    ):
        self.url = url
        self.provider_id = provider_id or f"http:{model or url}"
        self._model = model
        self._timeout_s = timeout_s
        self._session = session or requests.Session()
        self._sleep = sleep
        self._headers = _auth_headers(api_key)

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload: dict = {
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        if self._model:
            payload["model"] = self._model
        body = _post_with_retries(
            self._session,
            self.url,
            payload,
            headers=self._headers,
            timeout_s=self._timeout_s,
            sleep=self._sleep,
        )
        content = body.get("content")
        if not isinstance(content, str):
            raise ProviderError(f"{self.url} reply carries no 'content' string")
        usage = body.get("usage") or {}
        return ChatResponse(
            content=content,
            provider_id=self.provider_id,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        )


class HttpEmbedder:
    """Text embeddings against one JSON endpoint.

    Wire shape: POST {model?, text} and expect {embedding: [float, ...]}.
    """

    def __init__(
        self,
        url: str,
        *,
        dim: int = DEFAULT_EMBED_DIM,
        api_key: str | None = None,
        model: str | None = None,
        timeout_s: float = 30.0,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if dim <= 0:
            raise ConfigError(f"embedder dim must be positive, got {dim}")
        self.url = url
        self.dim = dim
        self._model = model
        self._timeout_s = timeout_s
        self._session = session or requests.Session()
        self._sleep = sleep
        self._headers = _auth_headers(api_key)

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValidationError("cannot embed empty text")
        payload: dict = {"text": text}
        if self._model:
            payload["model"] = self._model
        body = _post_with_retries(
            self._session,
            self.url,
            payload,
            headers=self._headers,
            timeout_s=self._timeout_s,
            sleep=self._sleep,
        )
        embedding = body.get("embedding")
        if not isinstance(embedding, list):
            raise ProviderError(f"{self.url} reply carries no 'embedding' list")
        vec = np.asarray(embedding, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise ShapeError(f"{self.url} returned dim {vec.shape}, expected ({self.dim},)")
        return vec
