"""MLLM provider clients: HTTP adapters, disk cache, retries, rate limit.

One neutral internal request shape (model, temperature, one user message
holding a text part and an optional base64 image part) is translated by
thin adapters into OpenAI- or Gemini-style JSON. A deterministic mock
provider ships so the whole caption pipeline runs offline.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import httpx

from .errors import AuthMissing, ProviderError

RETRYABLE_STATUS = {429, 500, 502, 503, 504}


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "mock"  # mock | neutral | openai | gemini
    endpoint_url: str = ""
    model_id: str = "mock-mllm"
    temperature: float = 0.2
    max_retries: int = 3
    rate_limit: float | None = None  # requests per second, None = unlimited
    api_key_env: str = "CAPFUSE_API_KEY"
    concurrency: int = 4
    retry_base_s: float = 1.0
    timeout_s: float = 60.0

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


def cache_key(sample_id: str, characteristic: str, model_id: str, prompt: str) -> str:
    """Content address for one caption request; stable across runs."""
    payload = json.dumps(
        [sample_id, characteristic, model_id, prompt], ensure_ascii=False
    ).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


class CaptionCache:
    """One JSON file per cache key; reads are lock-free, writes atomic."""

    def __init__(self, cache_dir: str | Path):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.dir / f"{key}.json"

    def get(self, key: str) -> str | None:
        path = self._path(key)
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as f:
            return json.load(f)["response_text"]

    def put(self, key: str, response_text: str, meta: dict | None = None) -> None:
        entry = {"key": key, "response_text": response_text}
        if meta:
            entry.update(meta)
        tmp = self._path(key).with_suffix(".tmp")
        with self._write_lock:
            with open(tmp, "w", encoding="utf-8") as f:
                json.dump(entry, f, ensure_ascii=False)
            tmp.replace(self._path(key))


class RateLimiter:
    """Token bucket; acquire() blocks until a request slot is free."""

    def __init__(self, rate_per_s: float | None, clock=time.monotonic, sleep=time.sleep):
        self.rate = rate_per_s
        self._clock = clock
        self._sleep = sleep
        self._tokens = max(1.0, rate_per_s) if rate_per_s else 0.0
        self._capacity = self._tokens
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if not self.rate:
            return
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self._capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


class MockProvider:
    """Offline provider: deterministic pseudo-caption from the request key.

    Used by tests and as a dry-run mode; the text is a stable function
    of (model, prompt, key hint) so repeated runs are byte-identical.
    """

    def __init__(self, cfg: ProviderConfig | None = None):
        self.cfg = cfg or ProviderConfig()
        self.call_count = 0

    def complete(self, prompt: str, image_b64: str | None = None, key_hint: str = "") -> str:
        self.call_count += 1
        digest = hashlib.sha256(
            f"{self.cfg.model_id}|{prompt}|{key_hint}".encode("utf-8")
        ).hexdigest()
        words = [digest[i : i + 4] for i in range(0, 24, 4)]
        return f"Synthetic description {' '.join(words)} rendered for offline runs."


class HttpProvider:
    """HTTPS client with exponential-backoff retries behind a token bucket."""

    def __init__(self, cfg: ProviderConfig, transport=None, sleep=time.sleep):
        if cfg.kind not in ("neutral", "openai", "gemini"):
            raise ValueError(f"unknown provider kind {cfg.kind!r}")
        if not cfg.endpoint_url:
            raise ValueError("endpoint_url required for HTTP providers")
        self.cfg = cfg
        self.call_count = 0
        self.retry_count = 0
        self._sleep = sleep
        self._limiter = RateLimiter(cfg.rate_limit, sleep=sleep)
        self._client = httpx.Client(transport=transport, timeout=cfg.timeout_s)

    def _api_key(self) -> str:
        key = os.environ.get(self.cfg.api_key_env)
        if not key:
            raise AuthMissing(
                f"env var {self.cfg.api_key_env} unset but uncached requests remain")
        return key

    def _build_request(self, prompt: str, image_b64: str | None):
        cfg = self.cfg
        if cfg.kind == "openai":
            content: list[dict] = [{"type": "text", "text": prompt}]
            if image_b64:
                content.append({
                    "type": "image_url",
                    "image_url": {"url": f"data:image/jpeg;base64,{image_b64}"},
                })
            body = {
                "model": cfg.model_id,
                "temperature": cfg.temperature,
                "messages": [{"role": "user", "content": content}],
            }
            headers = {"Authorization": f"Bearer {self._api_key()}"}
        elif cfg.kind == "gemini":
            parts: list[dict] = [{"text": prompt}]
            if image_b64:
                parts.append({"inline_data": {"mime_type": "image/jpeg", "data": image_b64}})
            body = {
                "contents": [{"role": "user", "parts": parts}],
                "generationConfig": {"temperature": cfg.temperature},
            }
            headers = {"x-goog-api-key": self._api_key()}
        else:
            parts = [{"text": prompt}]
            if image_b64:
                parts.append({"image_b64": image_b64})
            body = {
                "model": cfg.model_id,
                "temperature": cfg.temperature,
                "messages": [{"role": "user", "parts": parts}],
            }
            headers = {"Authorization": f"Bearer {self._api_key()}"}
        return body, headers

    def _parse_response(self, data: dict) -> str:
        try:
            if self.cfg.kind == "openai":
                return data["choices"][0]["message"]["content"]
            if self.cfg.kind == "gemini":
                parts = data["candidates"][0]["content"]["parts"]
                return "".join(p.get("text", "") for p in parts)
            return data["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed provider response: {exc!r}") from exc

    def complete(self, prompt: str, image_b64: str | None = None, key_hint: str = "") -> str:
        body, headers = self._build_request(prompt, image_b64)
        last_error = "no attempts made"
        for attempt in range(self.cfg.max_retries + 1):
            self._limiter.acquire()
            self.call_count += 1
            try:
                resp = self._client.post(self.cfg.endpoint_url, json=body, headers=headers)
            except httpx.HTTPError as exc:
                last_error = f"transport error: {exc}"
                self._backoff(attempt, None)
                continue
            if resp.status_code == 200:
                return self._parse_response(resp.json())
            last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
            if resp.status_code not in RETRYABLE_STATUS:
                raise ProviderError(last_error)
            self._backoff(attempt, resp.headers.get("retry-after"))
        raise ProviderError(
            f"gave up after {self.cfg.max_retries + 1} attempts; last: {last_error}")

    def _backoff(self, attempt: int, retry_after: str | None) -> None:
        if attempt >= self.cfg.max_retries:
            return  # out of attempts, caller raises
        self.retry_count += 1
        if retry_after:
            try:
                self._sleep(float(retry_after))
                return
            except ValueError:
                pass
        base = self.cfg.retry_base_s * (2.0**attempt)
        self._sleep(base * (1.0 + 0.25 * random.uniform(-1.0, 1.0)))


def make_provider(cfg: ProviderConfig, transport=None, sleep=time.sleep):
    if cfg.kind == "mock":
        return MockProvider(cfg)
    return HttpProvider(cfg, transport=transport, sleep=sleep)
