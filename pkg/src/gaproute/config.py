"""Configuration: typed sections, YAML/JSON loading, and dotted overrides.

Precedence is flags > env > file: CLI flags arrive as dotted-path overrides
applied on top of the parsed file, and API keys are read from the
environment variable each section names rather than stored in the file.
Unknown keys are rejected so typos fail at load time.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .router import RouterPolicy
from .upstream import (
    DEFAULT_EMBEDDING_DIM,
    DEFAULT_TEMPERATURE,
    ChatClient,
    EmbeddingClient,
    ModelDescriptor,
    RetryPolicy,
    validate_roster,
)


class ConfigError(Exception):
    """The config file or an override is malformed."""


def _check_keys(section: Mapping[str, Any], allowed: Sequence[str], where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


@dataclass(frozen=True)
class UpstreamConfig:
    base_url: str = ""
    api_key_env: str = ""
    timeout: float = 60.0
    temperature: float = DEFAULT_TEMPERATURE
    retry: RetryPolicy = RetryPolicy()

    def api_key(self, env: Mapping[str, str] | None = None) -> str | None:
        if not self.api_key_env:
            return None
        return (env if env is not None else os.environ).get(self.api_key_env)

    @classmethod
    def from_dict(cls, section: Mapping[str, Any]) -> "UpstreamConfig":
        _check_keys(section, ("base_url", "api_key_env", "timeout", "temperature", "retry"), "upstream")
        retry_section = dict(section.get("retry", {}))
        _check_keys(
            retry_section,
            ("max_attempts", "backoff_base", "max_backoff", "jitter"),
            "upstream.retry",
        )
        return cls(
            base_url=section.get("base_url", ""),
            api_key_env=section.get("api_key_env", ""),
            timeout=float(section.get("timeout", 60.0)),
            temperature=float(section.get("temperature", DEFAULT_TEMPERATURE)),
            retry=RetryPolicy(**retry_section),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "base_url": self.base_url,
            "api_key_env": self.api_key_env,
            "timeout": self.timeout,
            "temperature": self.temperature,
            "retry": {
                "max_attempts": self.retry.max_attempts,
                "backoff_base": self.retry.backoff_base,
                "max_backoff": self.retry.max_backoff,
                "jitter": self.retry.jitter,
            },
        }


@dataclass(frozen=True)
class EmbeddingConfig:
    model_tag: str = "text-embedding-ada-002"
    dim: int = DEFAULT_EMBEDDING_DIM
    base_url: str = ""
    api_key_env: str = ""
    cache_dir: str = ""

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ConfigError("embedding.dim must be positive")

    def api_key(self, env: Mapping[str, str] | None = None) -> str | None:
        if not self.api_key_env:
            return None
        return (env if env is not None else os.environ).get(self.api_key_env)

    @classmethod
    def from_dict(cls, section: Mapping[str, Any]) -> "EmbeddingConfig":
        _check_keys(
            section, ("model_tag", "dim", "base_url", "api_key_env", "cache_dir"), "embedding"
        )
        return cls(
            model_tag=section.get("model_tag", "text-embedding-ada-002"),
            dim=int(section.get("dim", DEFAULT_EMBEDDING_DIM)),
            base_url=section.get("base_url", ""),
            api_key_env=section.get("api_key_env", ""),
            cache_dir=section.get("cache_dir", ""),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_tag": self.model_tag,
            "dim": self.dim,
            "base_url": self.base_url,
            "api_key_env": self.api_key_env,
            "cache_dir": self.cache_dir,
        }


@dataclass(frozen=True)
class CollectConfig:
    parallelism: int = 4
    failure_ceiling: float = 0.5

    def __post_init__(self) -> None:
        if self.parallelism < 1:
            raise ConfigError("collect.parallelism must be at least 1")
        if not 0.0 <= self.failure_ceiling <= 1.0:
            raise ConfigError("collect.failure_ceiling must be within [0, 1]")

    @classmethod
    def from_dict(cls, section: Mapping[str, Any]) -> "CollectConfig":
        _check_keys(section, ("parallelism", "failure_ceiling"), "collect")
        return cls(
            parallelism=int(section.get("parallelism", 4)),
            failure_ceiling=float(section.get("failure_ceiling", 0.5)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {"parallelism": self.parallelism, "failure_ceiling": self.failure_ceiling}


@dataclass(frozen=True)
class PolicyConfig:
    tau: float = 0.10
    mode: str = "global"
    fallback: str = "classify_then_query_one"
    bundle_path: str = "bundle"

    def __post_init__(self) -> None:
        self.router_policy()  # reuse the policy validation

    def router_policy(self) -> RouterPolicy:
        try:
            return RouterPolicy(tau=self.tau, mode=self.mode, fallback=self.fallback)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, section: Mapping[str, Any]) -> "PolicyConfig":
        _check_keys(section, ("tau", "mode", "fallback", "bundle_path"), "policy")
        defaults = cls()
        return cls(
            tau=float(section.get("tau", defaults.tau)),
            mode=section.get("mode", defaults.mode),
            fallback=section.get("fallback", defaults.fallback),
            bundle_path=section.get("bundle_path", defaults.bundle_path),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "tau": self.tau,
            "mode": self.mode,
            "fallback": self.fallback,
            "bundle_path": self.bundle_path,
        }


@dataclass(frozen=True)
class GatewayConfig:
    listen: str = "127.0.0.1:8080"
    roster: tuple[ModelDescriptor, ...] = ()
    policy: PolicyConfig = PolicyConfig()
    upstream: UpstreamConfig = UpstreamConfig()
    embedding: EmbeddingConfig = EmbeddingConfig()
    collect: CollectConfig = CollectConfig()
    metrics_enabled: bool = True

    def __post_init__(self) -> None:
        validate_roster(self.roster)

    @property
    def host(self) -> str:
        return self.listen.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        try:
            return int(self.listen.rsplit(":", 1)[1])
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"listen address {self.listen!r} needs host:port") from exc

    def descriptor(self, model_id: str) -> ModelDescriptor:
        for descriptor in self.roster:
            if descriptor.id == model_id:
                return descriptor
        raise ConfigError(f"model {model_id!r} not in roster")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GatewayConfig":
        _check_keys(
            data,
            ("listen", "roster", "policy", "upstream", "embedding", "collect", "metrics_enabled"),
            "top-level",
        )
        roster = tuple(
            ModelDescriptor.from_json(entry) for entry in data.get("roster", ())
        )
        return cls(
            listen=data.get("listen", "127.0.0.1:8080"),
            roster=roster,
            policy=PolicyConfig.from_dict(data.get("policy", {})),
            upstream=UpstreamConfig.from_dict(data.get("upstream", {})),
            embedding=EmbeddingConfig.from_dict(data.get("embedding", {})),
            collect=CollectConfig.from_dict(data.get("collect", {})),
            metrics_enabled=bool(data.get("metrics_enabled", True)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "listen": self.listen,
            "roster": [d.to_json() for d in self.roster],
            "policy": self.policy.to_dict(),
            "upstream": self.upstream.to_dict(),
            "embedding": self.embedding.to_dict(),
            "collect": self.collect.to_dict(),
            "metrics_enabled": self.metrics_enabled,
        }


def _coerce(value: str) -> Any:
    try:
        return json.loads(value)
    except (json.JSONDecodeError, TypeError):
        return value


def apply_overrides(data: dict[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    """Set dotted-path keys (e.g. policy.tau=0.2) on a raw config dict.

    String values are coerced through JSON so numbers and booleans from CLI
    flags land typed; anything unparseable stays a string.
    """
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"cannot override {dotted!r}: {part!r} is not a section")
            node = child
        node[parts[-1]] = _coerce(value) if isinstance(value, str) else value
    return data


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> GatewayConfig:
    """Parse YAML or JSON by suffix, apply overrides, and build the config."""
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        try:
            if path.suffix == ".json":
                data = json.loads(text)
            else:
                data = yaml.safe_load(text) or {}
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"config file {path} is not valid: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
    if overrides:
        data = apply_overrides(data, overrides)
    try:
        return GatewayConfig.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def build_chat_client(config: GatewayConfig) -> ChatClient:
    return ChatClient(
        base_url=config.upstream.base_url,
        api_key=config.upstream.api_key(),
        retry=config.upstream.retry,
        timeout=config.upstream.timeout,
        default_temperature=config.upstream.temperature,
    )


def build_embedding_client(config: GatewayConfig) -> EmbeddingClient:
    embedding = config.embedding
    return EmbeddingClient(
        model_tag=embedding.model_tag,
        dim=embedding.dim,
        base_url=embedding.base_url or config.upstream.base_url,
        cache_dir=embedding.cache_dir or None,
        api_key=embedding.api_key() or config.upstream.api_key(),
        retry=config.upstream.retry,
        timeout=config.upstream.timeout,
    )
