"""HTTP routing gateway.

FastAPI app exposing the decision rule online: POST /v1/route embeds and
routes without calling any expert; POST /v1/chat/completions additionally
forwards to the routed expert (one retry, then failover to the other top-2
candidate) and returns the upstream body unchanged plus X-Router-* headers.
The loaded bundle is an immutable snapshot swapped atomically on reload, so
request handling needs no routing-side locks; counters are guarded.

Startup is crash-only: a missing or corrupt bundle, or a bundle whose roster
hash differs from the configured roster, raises before any port is bound.
"""

from __future__ import annotations

import hashlib
import logging
import signal
import threading
import time
from collections import OrderedDict
from typing import Any, Callable

import numpy as np
from fastapi import Body, FastAPI, HTTPException
from fastapi.responses import JSONResponse

from .config import GatewayConfig, build_chat_client, build_embedding_client
from .learners import BundleError, load_bundle, roster_hash
from .router import FALLBACK_HEDGED_BOTH, RoutingDecision, route_with_bundle
from .upstream import ChatClient, CollectionError, expert_ids

log = logging.getLogger("gaproute.gateway")

_STAGES = ("embed", "inference", "upstream")


class Metrics:
    """Thread-safe counters; snapshot() reconstructs the empirical cost."""

    def __init__(self, roster: tuple[str, ...]) -> None:
        self._lock = threading.Lock()
        self.requests = 0
        self.fallback_count = 0
        self.chosen = {model: 0 for model in roster}
        self._latency = {stage: [0, 0, 0] for stage in _STAGES}  # count, total, max

    def record_decision(self, decision: RoutingDecision) -> None:
        with self._lock:
            self.requests += 1
            self.fallback_count += int(decision.fallback_used)
            self.chosen[decision.chosen] = self.chosen.get(decision.chosen, 0) + 1

    def record_latency(self, stage: str, ms: int) -> None:
        with self._lock:
            row = self._latency[stage]
            row[0] += 1
            row[1] += ms
            row[2] = max(row[2], ms)

    def snapshot(self) -> dict[str, Any]:
        with self._lock:
            fraction = self.fallback_count / self.requests if self.requests else 0.0
            return {
                "requests": self.requests,
                "fallback_count": self.fallback_count,
                "fallback_fraction": fraction,
                "expected_cost": 1.0 + fraction,
                "chosen": dict(self.chosen),
                "latency_ms": {
                    stage: {
                        "count": row[0],
                        "total_ms": row[1],
                        "mean_ms": row[1] / row[0] if row[0] else 0.0,
                        "max_ms": row[2],
                    }
                    for stage, row in self._latency.items()
                },
            }


class _LruCache:
    def __init__(self, maxsize: int = 2048) -> None:
        self._data: OrderedDict[str, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()
        self._maxsize = maxsize

    def get(self, key: str) -> np.ndarray | None:
        with self._lock:
            value = self._data.get(key)
            if value is not None:
                self._data.move_to_end(key)
            return value

    def put(self, key: str, value: np.ndarray) -> None:
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self._maxsize:
                self._data.popitem(last=False)


class GatewayState:
    def __init__(
        self,
        config: GatewayConfig,
        bundle: Any,
        embedder: Any,
        chat_client: ChatClient,
    ) -> None:
        self.config = config
        self.policy = config.policy.router_policy()
        self.embedder = embedder
        self.chat_client = chat_client
        self.metrics = Metrics(tuple(bundle.roster))
        self._bundle = bundle
        self._bundle_lock = threading.Lock()
        self._embed_cache = _LruCache()

    @property
    def bundle(self) -> Any:
        with self._bundle_lock:
            return self._bundle

    def expected_roster_hash(self) -> str:
        return roster_hash(list(expert_ids(self.config.roster)))

    def reload(self) -> str:
        """Load a fresh bundle from the configured path and swap it in; the
        old snapshot keeps serving in-flight requests."""
        bundle = load_bundle(
            self.config.policy.bundle_path,
            expected_roster_hash=self.expected_roster_hash(),
        )
        with self._bundle_lock:
            self._bundle = bundle
        log.info('{"event": "bundle_reloaded", "roster_hash": "%s"}', bundle.roster_hash)
        return bundle.roster_hash

    def embed(self, text: str) -> np.ndarray:
        key = hashlib.sha256(text.encode("utf-8")).hexdigest()
        cached = self._embed_cache.get(key)
        if cached is not None:
            return cached
        vector = self.embedder.embed(text)
        values = np.asarray(vector.values, dtype=np.float64)
        self._embed_cache.put(key, values)
        return values


def _last_user_content(payload: dict[str, Any]) -> str:
    messages = payload.get("messages")
    if not isinstance(messages, list):
        return ""
    for message in reversed(messages):
        if isinstance(message, dict) and message.get("role") == "user":
            content = message.get("content")
            return content if isinstance(content, str) else ""
    return ""


def create_app(
    config: GatewayConfig,
    bundle: Any | None = None,
    embedder: Any | None = None,
    chat_client: ChatClient | None = None,
) -> FastAPI:
    """Build the app, loading and verifying the bundle first so that any
    inconsistency raises before a port could be bound."""
    if not config.roster:
        raise BundleError("gateway config needs a roster")
    expected = roster_hash(list(expert_ids(config.roster)))
    if bundle is None:
        bundle = load_bundle(config.policy.bundle_path, expected_roster_hash=expected)
    elif bundle.roster_hash != expected:
        raise BundleError("bundle roster hash does not match configured roster")

    state = GatewayState(
        config,
        bundle,
        embedder if embedder is not None else build_embedding_client(config),
        chat_client if chat_client is not None else build_chat_client(config),
    )
    app = FastAPI(title="gap routing gateway")
    app.state.gateway = state

    def _route_prompt(prompt: str) -> tuple[RoutingDecision, dict[str, int]]:
        if state.bundle is None:
            raise HTTPException(status_code=503, detail="bundle not loaded")
        started = time.perf_counter()
        try:
            embedding = state.embed(prompt)
        except CollectionError as exc:
            raise HTTPException(status_code=502, detail=f"embedding upstream failure: {exc}")
        embedded = time.perf_counter()
        decision = route_with_bundle(embedding, state.bundle, state.policy)
        routed = time.perf_counter()

        embed_ms = int(round((embedded - started) * 1000))
        inference_ms = int(round((routed - embedded) * 1000))
        state.metrics.record_decision(decision)
        state.metrics.record_latency("embed", embed_ms)
        state.metrics.record_latency("inference", inference_ms)
        return decision, {"embed_ms": embed_ms, "inference_ms": inference_ms, "upstream_ms": 0}

    @app.get("/healthz")
    def healthz() -> dict[str, str]:
        return {"status": "ok", "roster_hash": state.bundle.roster_hash}

    @app.get("/metrics")
    def metrics() -> dict[str, Any]:
        if not config.metrics_enabled:
            raise HTTPException(status_code=404, detail="metrics disabled")
        return state.metrics.snapshot()

    @app.post("/admin/reload")
    def reload_bundle() -> dict[str, str]:
        try:
            new_hash = state.reload()
        except BundleError as exc:
            raise HTTPException(status_code=500, detail=f"reload failed: {exc}")
        return {"status": "reloaded", "roster_hash": new_hash}

    @app.post("/v1/route")
    def route_endpoint(payload: dict[str, Any] = Body(...)) -> dict[str, Any]:
        prompt = payload.get("prompt", "")
        if not isinstance(prompt, str) or not prompt.strip():
            raise HTTPException(status_code=400, detail="prompt must be a non-empty string")
        decision, timing = _route_prompt(prompt)
        return {"decision": decision.to_json(), "timing": timing}

    @app.post("/v1/chat/completions")
    def chat_endpoint(payload: dict[str, Any] = Body(...)) -> JSONResponse:
        prompt = _last_user_content(payload)
        if not prompt.strip():
            raise HTTPException(status_code=400, detail="need a non-empty user message")
        decision, timing = _route_prompt(prompt)

        other = decision.top2 if decision.chosen == decision.top1 else decision.top1
        started = time.perf_counter()
        body = None
        served = ""
        # Chosen expert gets one retry; then the other top-2 candidate.
        for candidate in (decision.chosen, decision.chosen, other):
            try:
                body = state.chat_client.complete_raw(config.descriptor(candidate), payload)
                served = candidate
                break
            except CollectionError as exc:
                log.warning('{"event": "upstream_failed", "model": "%s", "error": "%s"}', candidate, exc)
        if body is None:
            raise HTTPException(status_code=502, detail="both routed upstreams failed")

        failover = served != decision.chosen
        hedged = state.policy.fallback == FALLBACK_HEDGED_BOTH and decision.fallback_used
        if hedged and not failover:
            # Dual-query mode: the loser's answer is fetched and discarded.
            try:
                state.chat_client.complete_raw(config.descriptor(other), payload)
            except CollectionError:
                pass
        upstream_ms = int(round((time.perf_counter() - started) * 1000))
        state.metrics.record_latency("upstream", upstream_ms)

        if decision.fallback_used and failover:
            fallback_header = "classifier+failover"
        elif decision.fallback_used:
            fallback_header = "classifier"
        elif failover:
            fallback_header = "failover"
        else:
            fallback_header = "none"
        headers = {
            "X-Router-Model": served,
            "X-Router-Gap": f"{decision.gap:.6f}",
            "X-Router-Fallback": fallback_header,
        }
        return JSONResponse(content=body, headers=headers)

    return app


def _install_sighup_reload(state: GatewayState) -> None:
    def handler(signum: int, frame: Any) -> None:
        try:
            state.reload()
        except BundleError as exc:
            log.error('{"event": "reload_failed", "error": "%s"}', exc)

    signal.signal(signal.SIGHUP, handler)


def serve(config: GatewayConfig, run: Callable[..., None] | None = None) -> None:
    """Validate, build, and run the app; SIGHUP triggers a bundle reload."""
    app = create_app(config)
    if hasattr(signal, "SIGHUP"):
        _install_sighup_reload(app.state.gateway)
    if run is None:
        import uvicorn

        run = uvicorn.run
    run(app, host=config.host, port=config.port, log_level="info")
