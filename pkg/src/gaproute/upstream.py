"""Upstream clients and batch collection.

Chat completions and embeddings speak OpenAI-compatible JSON against a
configurable base URL, so the same client covers real providers and test
mocks. Embeddings are cached content-addressed by (model tag, text hash).
Transient failures (transport errors, 429, 5xx) retry with exponential
backoff and jitter, honoring Retry-After; batch collection runs a bounded
worker pool, skips already-stored pairs, and tolerates failures up to a
configured ceiling.
"""

from __future__ import annotations

import hashlib
import json
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import httpx

ROLE_EXPERT = "expert"
ROLE_JUDGE = "judge"

DEFAULT_TEMPERATURE = 0.7
DEFAULT_EMBEDDING_DIM = 1536
_RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class CollectionError(Exception):
    """An upstream call or a collection run failed past its retry budget."""


@dataclass(frozen=True)
class ModelDescriptor:
    id: str
    route: str
    roles: tuple[str, ...] = (ROLE_EXPERT,)
    display_name: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("model id must be non-empty")
        if not self.roles:
            raise ValueError("model needs at least one role")
        unknown = set(self.roles) - {ROLE_EXPERT, ROLE_JUDGE}
        if unknown:
            raise ValueError(f"unknown roles {sorted(unknown)}")
        if not self.display_name:
            object.__setattr__(self, "display_name", self.id)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "route": self.route,
            "roles": list(self.roles),
            "display_name": self.display_name,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "ModelDescriptor":
        return cls(
            id=obj["id"],
            route=obj["route"],
            roles=tuple(obj.get("roles", (ROLE_EXPERT,))),
            display_name=obj.get("display_name", ""),
        )


def validate_roster(descriptors: Sequence[ModelDescriptor]) -> tuple[ModelDescriptor, ...]:
    """Duplicate ids are configuration errors; the given order is canonical."""
    seen: set[str] = set()
    for descriptor in descriptors:
        if descriptor.id in seen:
            raise ValueError(f"duplicate model id {descriptor.id!r}")
        seen.add(descriptor.id)
    return tuple(descriptors)


def expert_ids(descriptors: Sequence[ModelDescriptor]) -> tuple[str, ...]:
    return tuple(d.id for d in descriptors if ROLE_EXPERT in d.roles)


@dataclass(frozen=True)
class ResponseRecord:
    prompt_id: str
    model_id: str
    text: str
    latency_ms: int
    created_at: str
    temperature: float

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError("latency must be non-negative")

    def to_json(self) -> dict[str, Any]:
        return {
            "prompt_id": self.prompt_id,
            "model_id": self.model_id,
            "text": self.text,
            "latency_ms": self.latency_ms,
            "created_at": self.created_at,
            "temperature": self.temperature,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "ResponseRecord":
        return cls(
            prompt_id=obj["prompt_id"],
            model_id=obj["model_id"],
            text=obj["text"],
            latency_ms=int(obj["latency_ms"]),
            created_at=obj["created_at"],
            temperature=float(obj["temperature"]),
        )


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    dim: int
    model_tag: str

    def __post_init__(self) -> None:
        if len(self.values) != self.dim:
            raise ValueError(f"vector length {len(self.values)} != dim {self.dim}")
        if not all(v == v and abs(v) != float("inf") for v in self.values):
            raise ValueError("embedding values must be finite")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    backoff_base: float = 0.5
    max_backoff: float = 30.0
    jitter: float = 0.1

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("need at least one attempt")
        if self.backoff_base < 0 or self.max_backoff < 0 or self.jitter < 0:
            raise ValueError("backoff parameters must be non-negative")

    def delay(self, attempt: int, retry_after: float | None, rng: random.Random) -> float:
        if retry_after is not None:
            return retry_after
        base = min(self.backoff_base * (2.0**attempt), self.max_backoff)
        return base * (1.0 + rng.uniform(0.0, self.jitter))


def _retry_after_seconds(response: httpx.Response) -> float | None:
    header = response.headers.get("Retry-After")
    if header is None:
        return None
    try:
        return max(0.0, float(header))
    except ValueError:
        return None


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


class _BaseClient:
    def __init__(
        self,
        base_url: str,
        api_key: str | None,
        retry: RetryPolicy,
        timeout: float,
        client: httpx.Client | None,
        sleep: Callable[[float], None],
        rng: random.Random | None,
    ) -> None:
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(
            base_url=base_url, timeout=timeout, headers=headers
        )
        self._retry = retry
        self._sleep = sleep
        self._rng = rng or random.Random()

    def close(self) -> None:
        self._client.close()

    def _post_with_retry(self, path: str, body: dict[str, Any]) -> httpx.Response:
        last_error: Exception | None = None
        for attempt in range(self._retry.max_attempts):
            retry_after: float | None = None
            try:
                response = self._client.post(path, json=body)
            except httpx.TransportError as exc:
                last_error = exc
            else:
                if response.status_code == 200:
                    return response
                last_error = CollectionError(
                    f"upstream returned {response.status_code} for {path}"
                )
                if response.status_code not in _RETRYABLE_STATUS:
                    raise last_error
                retry_after = _retry_after_seconds(response)
            if attempt + 1 < self._retry.max_attempts:
                self._sleep(self._retry.delay(attempt, retry_after, self._rng))
        raise CollectionError(
            f"{path} failed after {self._retry.max_attempts} attempts"
        ) from last_error


class ChatClient(_BaseClient):
    """Completion calls against /chat/completions."""

    def __init__(
        self,
        base_url: str = "",
        api_key: str | None = None,
        retry: RetryPolicy = RetryPolicy(),
        timeout: float = 60.0,
        default_temperature: float = DEFAULT_TEMPERATURE,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
        now: Callable[[], str] = _utc_now,
    ) -> None:
        super().__init__(base_url, api_key, retry, timeout, client, sleep, rng)
        self._default_temperature = default_temperature
        self._now = now

    def complete_raw(self, model: ModelDescriptor, body: Mapping[str, Any]) -> dict[str, Any]:
        """Forward an OpenAI-compatible body as-is (model field swapped for
        the descriptor's route) and return the upstream JSON unchanged."""
        payload = dict(body)
        payload["model"] = model.route
        return self._post_with_retry("/chat/completions", payload).json()

    def complete(
        self,
        model: ModelDescriptor,
        prompt: str,
        temperature: float | None = None,
        prompt_id: str = "",
    ) -> ResponseRecord:
        if temperature is None:
            temperature = self._default_temperature
        body = {
            "model": model.route,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        }
        started = time.monotonic()
        response = self._post_with_retry("/chat/completions", body)
        latency_ms = int(round((time.monotonic() - started) * 1000))
        payload = response.json()
        try:
            text = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise CollectionError("malformed completion payload") from exc
        if not text:
            raise CollectionError(f"empty completion from {model.id}")
        return ResponseRecord(
            prompt_id=prompt_id,
            model_id=model.id,
            text=text,
            latency_ms=latency_ms,
            created_at=self._now(),
            temperature=temperature,
        )


class EmbeddingClient(_BaseClient):
    """Embedding calls against /embeddings with a content-addressed cache.

    The configured dim is a pin: any vector of a different length, from the
    wire or from a cache file, is a hard error rather than a retry.
    """

    def __init__(
        self,
        model_tag: str,
        dim: int = DEFAULT_EMBEDDING_DIM,
        base_url: str = "",
        cache_dir: str | Path | None = None,
        api_key: str | None = None,
        retry: RetryPolicy = RetryPolicy(),
        timeout: float = 60.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ) -> None:
        super().__init__(base_url, api_key, retry, timeout, client, sleep, rng)
        if dim < 1:
            raise ValueError("dim must be positive")
        self.model_tag = model_tag
        self.dim = dim
        self._cache_dir = Path(cache_dir) if cache_dir is not None else None

    def cache_key(self, text: str) -> str:
        digest = hashlib.sha256()
        digest.update(self.model_tag.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(text.encode("utf-8"))
        return digest.hexdigest()

    def _cache_path(self, text: str) -> Path | None:
        if self._cache_dir is None:
            return None
        return self._cache_dir / f"{self.cache_key(text)}.json"

    def _read_cache(self, path: Path) -> EmbeddingVector | None:
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except (FileNotFoundError, json.JSONDecodeError):
            return None
        if payload.get("model_tag") != self.model_tag:
            return None
        values = tuple(float(v) for v in payload["values"])
        if len(values) != self.dim:
            raise CollectionError(
                f"cached vector dim {len(values)} != configured dim {self.dim}"
            )
        return EmbeddingVector(values=values, dim=self.dim, model_tag=self.model_tag)

    def _write_cache(self, path: Path, vector: EmbeddingVector) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "model_tag": vector.model_tag,
            "dim": vector.dim,
            "values": list(vector.values),
        }
        tmp = path.with_suffix(f".tmp-{random.getrandbits(32):08x}")
        tmp.write_text(json.dumps(payload), encoding="utf-8")
        tmp.replace(path)

    def embed(self, text: str) -> EmbeddingVector:
        if not text:
            raise ValueError("cannot embed empty text")
        path = self._cache_path(text)
        if path is not None:
            cached = self._read_cache(path)
            if cached is not None:
                return cached

        response = self._post_with_retry(
            "/embeddings", {"model": self.model_tag, "input": text}
        )
        payload = response.json()
        try:
            raw = payload["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise CollectionError("malformed embedding payload") from exc
        if len(raw) != self.dim:
            raise CollectionError(
                f"upstream vector dim {len(raw)} != configured dim {self.dim}"
            )
        vector = EmbeddingVector(
            values=tuple(float(v) for v in raw), dim=self.dim, model_tag=self.model_tag
        )
        if path is not None:
            self._write_cache(path, vector)
        return vector

    def embed_many(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return [self.embed(text) for text in texts]


@dataclass(frozen=True)
class CollectionFailure:
    prompt_id: str
    model_id: str
    error: str


def _prompt_fields(prompt: Any) -> tuple[str, str]:
    if hasattr(prompt, "id") and hasattr(prompt, "text"):
        return prompt.id, prompt.text
    prompt_id, text = prompt
    return prompt_id, text


def collect_responses(
    prompts: Sequence[Any],
    experts: Sequence[ModelDescriptor],
    client: ChatClient,
    parallelism: int = 4,
    temperature: float | None = None,
    existing: Iterable[ResponseRecord] = (),
    failure_ceiling: float = 0.5,
) -> tuple[list[ResponseRecord], list[CollectionFailure]]:
    """One record per (prompt, expert), resumable and failure-bounded.

    Pairs already present in `existing` are returned as-is without an
    upstream call. Raises only when failures exceed failure_ceiling as a
    fraction of all pairs; partial failure otherwise comes back in the
    second element. Output is sorted by (prompt_id, model_id).
    """
    if parallelism < 1:
        raise ValueError("parallelism must be at least 1")
    if not 0.0 <= failure_ceiling <= 1.0:
        raise ValueError("failure ceiling must be within [0, 1]")
    validate_roster(experts)

    done: dict[tuple[str, str], ResponseRecord] = {
        (record.prompt_id, record.model_id): record for record in existing
    }
    pending: list[tuple[str, str, ModelDescriptor]] = []
    for prompt in prompts:
        prompt_id, text = _prompt_fields(prompt)
        for expert in experts:
            if (prompt_id, expert.id) not in done:
                pending.append((prompt_id, text, expert))

    failures: list[CollectionFailure] = []
    if pending:
        def run(task: tuple[str, str, ModelDescriptor]) -> tuple[Any, Any]:
            prompt_id, text, expert = task
            try:
                record = client.complete(
                    expert, text, temperature=temperature, prompt_id=prompt_id
                )
            except CollectionError as exc:
                return None, CollectionFailure(prompt_id, expert.id, str(exc))
            return record, None

        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            for record, failure in pool.map(run, pending):
                if failure is not None:
                    failures.append(failure)
                else:
                    done[(record.prompt_id, record.model_id)] = record

    total = len(prompts) * len(experts)
    if total and len(failures) / total > failure_ceiling:
        raise CollectionError(
            f"{len(failures)} of {total} pairs failed, above the "
            f"{failure_ceiling:.0%} ceiling"
        )
    records = [done[key] for key in sorted(done)]
    failures.sort(key=lambda f: (f.prompt_id, f.model_id))
    return records, failures
