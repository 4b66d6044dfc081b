"""Chat-completion gateway with pluggable providers and record/replay fixtures.

Every agent generation flows through `Gateway.complete`. Requests are keyed
by a canonical hash over (system prompt, messages, temperature, tag) plus a
per-(tag, hash) call ordinal, so repeated identical requests (temperature
sampling, restart refreshes) replay distinct recorded outputs in order while
whole-run replays stay bit-deterministic. Swapping live, record, and replay
providers changes no pipeline control flow.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FixtureMiss, ProviderError

logger = logging.getLogger(__name__)


class ProviderTransportError(ProviderError):
    """Retryable transport-level failure (network, 5xx, rate limit)."""


@dataclass(frozen=True)
class ChatMessage:
    role: str  # user | assistant
    content: str


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    messages: tuple
    temperature: float
    tag: str
    seed: int | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("ChatRequest needs at least one message")
        if not (0 <= self.temperature <= 2):
            raise ValueError(f"temperature out of range: {self.temperature}")

    def with_reply_and_followup(self, reply: str, followup: str) -> "ChatRequest":
        """Extend the conversation: the provider's reply plus a new user turn."""
        extended = self.messages + (ChatMessage("assistant", reply), ChatMessage("user", followup))
        return ChatRequest(self.system_prompt, extended, self.temperature, self.tag, self.seed)


@dataclass(frozen=True)
class ChatResponse:
    content: str
    provider_id: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


def canonical_payload(request: ChatRequest) -> dict:
    return {
        "system_prompt": request.system_prompt,
        "messages": [[m.role, m.content] for m in request.messages],
        "temperature": float(request.temperature),
        "tag": request.tag,
    }


def request_hash(request: ChatRequest) -> str:
    blob = json.dumps(canonical_payload(request), sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_TAG_SAFE = re.compile(r"[^A-Za-z0-9_.-]+")


class FixtureStore:
    """Directory of JSON fixture files, one per (request hash, ordinal)."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._lock = threading.Lock()
        self._index: dict[str, dict[int, Path]] = {}
        if self.directory.is_dir():
            # fixture files are named {tag}__{hash}__{ordinal}.json
            for path in sorted(self.directory.glob("*__*__*.json")):
                try:
                    payload = json.loads(path.read_text(encoding="utf-8"))
                    self._index.setdefault(payload["hash"], {})[int(payload["ordinal"])] = path
                except (json.JSONDecodeError, KeyError, ValueError):
                    logger.warning("skipping unreadable fixture file %s", path)

    def lookup(self, request_digest: str, ordinal: int) -> dict | None:
        """Exact (hash, ordinal) hit, else the highest recorded ordinal for
        the hash (so calling more times than recorded repeats the last
        response instead of failing)."""
        with self._lock:
            by_ordinal = self._index.get(request_digest)
            if not by_ordinal:
                return None
            path = by_ordinal.get(ordinal)
            if path is None:
                path = by_ordinal[max(by_ordinal)]
        return json.loads(path.read_text(encoding="utf-8"))

    def record(self, request: ChatRequest, request_digest: str, ordinal: int, response: ChatResponse) -> Path:
        tag = _TAG_SAFE.sub("-", request.tag) or "untagged"
        payload = {
            "hash": request_digest,
            "ordinal": ordinal,
            "request": canonical_payload(request),
            "response": {
                "content": response.content,
                "provider_id": response.provider_id,
                "prompt_tokens": response.prompt_tokens,
                "completion_tokens": response.completion_tokens,
            },
        }
        path = self.directory / f"{tag}__{request_digest[:16]}__{ordinal:03d}.json"
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            self._index.setdefault(request_digest, {})[ordinal] = path
        return path


class _OrdinalCounter:
    """Atomic per-(tag, hash) call counters, scoped to one provider instance."""

    def __init__(self) -> None:
        self._counts: dict[tuple, int] = {}
        self._lock = threading.Lock()

    def next(self, tag: str, request_digest: str) -> int:
        key = (tag, request_digest)
        with self._lock:
            value = self._counts.get(key, 0)
            self._counts[key] = value + 1
        return value


class ReplayProvider:
    provider_id = "replay"

    def __init__(self, store: FixtureStore):
        self.store = store
        self._ordinals = _OrdinalCounter()

    def complete(self, request: ChatRequest) -> ChatResponse:
        digest = request_hash(request)
        ordinal = self._ordinals.next(request.tag, digest)
        payload = self.store.lookup(digest, ordinal)
        if payload is None:
            raise FixtureMiss(digest, request.tag)
        body = payload["response"]
        return ChatResponse(
            content=body["content"],
            provider_id=body.get("provider_id", "replay"),
            prompt_tokens=int(body.get("prompt_tokens", 0)),
            completion_tokens=int(body.get("completion_tokens", 0)),
        )


class RecordingProvider:
    """Wraps a live (or scripted) provider and persists every exchange."""

    provider_id = "record"

    def __init__(self, inner, store: FixtureStore):
        self.inner = inner
        self.store = store
        self._ordinals = _OrdinalCounter()

    def complete(self, request: ChatRequest) -> ChatResponse:
        digest = request_hash(request)
        ordinal = self._ordinals.next(request.tag, digest)
        response = self.inner.complete(request)
        self.store.record(request, digest, ordinal, response)
        return response


class ScriptedProvider:
    """Computes responses from a function of (request, ordinal). Test/tooling use."""

    provider_id = "scripted"

    def __init__(self, script):
        self.script = script
        self._ordinals = _OrdinalCounter()

    def complete(self, request: ChatRequest) -> ChatResponse:
        ordinal = self._ordinals.next(request.tag, request_hash(request))
        content = self.script(request, ordinal)
        if content is None:
            raise ProviderError(f"script has no response for tag {request.tag!r}")
        return ChatResponse(content=content, provider_id=self.provider_id)


class HttpChatProvider:
    """Minimal OpenAI-style chat-completions client over HTTP."""

    def __init__(self, base_url: str, model: str, api_key_env: str = "ZINCSMITH_API_KEY",
                 timeout_s: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.provider_id = f"http:{model}"

    def complete(self, request: ChatRequest) -> ChatResponse:
        import httpx

        api_key = os.environ.get(self.api_key_env, "")
        if not api_key:
            raise ProviderError(f"credentials missing: set {self.api_key_env}")
        messages = [{"role": "system", "content": request.system_prompt}]
        messages += [{"role": m.role, "content": m.content} for m in request.messages]
        body: dict = {"model": self.model, "messages": messages, "temperature": request.temperature}
        if request.seed is not None:
            body["seed"] = request.seed
        try:
            reply = httpx.post(
                f"{self.base_url}/chat/completions",
                json=body,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self.timeout_s,
            )
        except httpx.HTTPError as exc:
            raise ProviderTransportError(str(exc)) from exc
        if reply.status_code == 429 or reply.status_code >= 500:
            raise ProviderTransportError(f"HTTP {reply.status_code}: {reply.text[:200]}")
        if reply.status_code != 200:
            raise ProviderError(f"HTTP {reply.status_code}: {reply.text[:200]}")
        data = reply.json()
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed completion payload: {exc}") from exc
        if not content:
            # empty completions only ever surface as explicit provider errors
            raise ProviderError("provider returned an empty completion")
        usage = data.get("usage", {})
        return ChatResponse(
            content=content,
            provider_id=self.provider_id,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        )


@dataclass
class Gateway:
    """Uniform completion entry point with transport-only retries.

    Content problems (unparseable replies) are the agents' concern and are
    never retried here; transport errors back off and retry up to 3 times.
    """

    provider: object
    max_retries: int = 3
    backoff_s: float = 0.5
    sleep: object = time.sleep
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self.calls_by_tag: dict[str, int] = {}

    def complete(self, request: ChatRequest) -> ChatResponse:
        root = request.tag.split("/", 1)[0]
        with self._lock:
            self.calls_by_tag[root] = self.calls_by_tag.get(root, 0) + 1
        attempt = 0
        while True:
            try:
                return self.provider.complete(request)
            except ProviderTransportError:
                attempt += 1
                if attempt > self.max_retries:
                    raise
                self.sleep(self.backoff_s * (2 ** (attempt - 1)))


def build_gateway(mode: str, fixtures_dir: str | Path | None = None,
                  live_config: dict | None = None, script=None) -> Gateway:
    """Assemble a gateway for one of the provider modes.

    live: HTTP provider from config; record: live (or scripted) wrapped with
    a fixture recorder; replay: fixtures only, no network.
    """
    if mode == "replay":
        if fixtures_dir is None:
            raise ProviderError("replay mode needs a fixtures directory")
        store = FixtureStore(fixtures_dir)
        if not store.directory.is_dir():
            raise ProviderError(f"fixtures directory does not exist: {store.directory}")
        return Gateway(provider=ReplayProvider(store))
    if mode == "record":
        if fixtures_dir is None:
            raise ProviderError("record mode needs a fixtures directory")
        inner = ScriptedProvider(script) if script is not None else _live_provider(live_config)
        return Gateway(provider=RecordingProvider(inner, FixtureStore(fixtures_dir)))
    if mode == "live":
        return Gateway(provider=_live_provider(live_config))
    raise ProviderError(f"unknown provider mode: {mode}")


def _live_provider(live_config: dict | None) -> HttpChatProvider:
    config = live_config or {}
    base_url = config.get("base_url", "")
    model = config.get("model", "")
    if not base_url or not model:
        raise ProviderError("live mode needs base_url and model in the provider config")
    return HttpChatProvider(
        base_url=base_url,
        model=model,
        api_key_env=config.get("api_key_env", "ZINCSMITH_API_KEY"),
        timeout_s=float(config.get("timeout_s", 120.0)),
    )
