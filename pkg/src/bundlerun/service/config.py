"""Service configuration.

One YAML file of flat keys, every key overridable through a
BUNDLERUN_<KEY> environment variable (dict-valued keys take JSON).
Validation is strict and happens before anything is constructed: a
process with a bad config never starts.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

import yaml

from bundlerun.errors import InvalidConfig

GiB = 1024**3
MiB = 1024**2

ENV_PREFIX = "BUNDLERUN_"


@dataclass(frozen=True)
class ServiceConfig:
    # http surface
    listen_host: str = "127.0.0.1"
    listen_port: int = 8080
    external_url: str = ""  # public base for presigned links; default http://listen
    static_dir: str = ""  # web UI assets; empty serves the JSON API only

    # shared state roots (all replicas must see the same ones)
    data_dir: str = "./bundlerun-data"
    registry_url: str = ""  # image registry endpoint; empty embeds a dev registry
    secret: str = "development-secret"  # presign HMAC key

    # execution
    workers: int = 2
    queue_limit: int = 64
    network_enabled: bool = False  # network inside sandboxes
    grace_seconds: float = 10.0  # TERM-to-KILL grace on cancel/limit
    recover_on_start: bool = True  # fail stranded jobs at startup (single-owner)

    # request/limit policy
    upload_cap_bytes: int = 1 * GiB
    max_wall_seconds: int = 6 * 3600  # hard per-job ceiling users cannot exceed
    default_wall_seconds: int = 900
    default_memory_bytes: int = 2 * GiB
    log_cap_bytes: int = 10 * MiB
    output_cap_bytes: int = 512 * MiB
    presign_ttl_seconds: int = 3600

    # retention
    upload_retention_days: float = 30.0
    artifact_retention_days: float = 90.0

    # image building
    image_cache_limit_bytes: int = 20 * GiB  # local rootfs LRU bound
    base_image_map_path: str = ""  # os -> base image table; empty uses built-in

    # bundle sources
    providers: dict[str, str] = field(default_factory=dict)  # name -> URL template
    provider_timeout_seconds: float = 20.0

    # abuse limits
    rate_limit_per_minute: float = 30.0
    rate_limit_burst: int = 10

    def validate(self) -> None:
        def positive(name: str):
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive")

        if not (1 <= self.listen_port <= 65535):
            raise InvalidConfig(f"listen_port {self.listen_port} out of range")
        if not self.data_dir:
            raise InvalidConfig("data_dir must be set")
        if not self.secret:
            raise InvalidConfig("secret must be non-empty")
        for name in (
            "workers",
            "queue_limit",
            "grace_seconds",
            "upload_cap_bytes",
            "max_wall_seconds",
            "default_wall_seconds",
            "default_memory_bytes",
            "log_cap_bytes",
            "output_cap_bytes",
            "presign_ttl_seconds",
            "upload_retention_days",
            "artifact_retention_days",
            "image_cache_limit_bytes",
            "provider_timeout_seconds",
            "rate_limit_per_minute",
            "rate_limit_burst",
        ):
            positive(name)
        if self.default_wall_seconds > self.max_wall_seconds:
            raise InvalidConfig(
                f"default_wall_seconds ({self.default_wall_seconds}) exceeds "
                f"max_wall_seconds ({self.max_wall_seconds})"
            )
        if self.base_image_map_path and not os.path.isfile(self.base_image_map_path):
            raise InvalidConfig(
                f"base_image_map_path {self.base_image_map_path!r} does not exist"
            )
        if self.static_dir and not os.path.isdir(self.static_dir):
            raise InvalidConfig(f"static_dir {self.static_dir!r} does not exist")
        for name, template in self.providers.items():
            if "{id}" not in template:
                raise InvalidConfig(
                    f"provider {name!r}: endpoint template must contain {{id}}"
                )

    @property
    def public_url(self) -> str:
        return self.external_url.rstrip("/") or (
            f"http://{self.listen_host}:{self.listen_port}"
        )


def _coerce(name: str, kind: type, raw: str):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw, 0)
        if kind is float:
            return float(raw)
        if kind is dict:
            doc = json.loads(raw)
            if not isinstance(doc, dict):
                raise ValueError("JSON value is not an object")
            return doc
        return raw
    except ValueError as exc:
        raise InvalidConfig(f"{ENV_PREFIX}{name.upper()}: {exc}") from exc


_FIELD_TYPES = {
    "listen_port": int,
    "workers": int,
    "queue_limit": int,
    "network_enabled": bool,
    "recover_on_start": bool,
    "grace_seconds": float,
    "upload_cap_bytes": int,
    "max_wall_seconds": int,
    "default_wall_seconds": int,
    "default_memory_bytes": int,
    "log_cap_bytes": int,
    "output_cap_bytes": int,
    "presign_ttl_seconds": int,
    "upload_retention_days": float,
    "artifact_retention_days": float,
    "image_cache_limit_bytes": int,
    "providers": dict,
    "provider_timeout_seconds": float,
    "rate_limit_per_minute": float,
    "rate_limit_burst": int,
}


def load_config(
    path: str | None = None, *, env: dict[str, str] | None = None
) -> ServiceConfig:
    """Defaults <- config file <- environment, then validate."""
    env = os.environ if env is None else env
    known = {f.name for f in fields(ServiceConfig)}
    values: dict = {}

    if path:
        try:
            with open(path) as f:
                doc = yaml.safe_load(f) or {}
        except OSError as exc:
            raise InvalidConfig(f"cannot read config {path!r}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise InvalidConfig(f"config {path!r} is not valid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise InvalidConfig(f"config {path!r} must be a mapping of keys")
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InvalidConfig(f"config {path!r}: unknown keys {', '.join(unknown)}")
        values.update(doc)

    for name in known:
        raw = env.get(ENV_PREFIX + name.upper())
        if raw is not None:
            values[name] = _coerce(name, _FIELD_TYPES.get(name, str), raw)

    for name, value in values.items():
        kind = _FIELD_TYPES.get(name, str)
        if kind is bool and not isinstance(value, bool):
            raise InvalidConfig(f"{name} must be a boolean, got {value!r}")
        if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
            raise InvalidConfig(f"{name} must be an integer, got {value!r}")
        if kind is float and not isinstance(value, (int, float)):
            raise InvalidConfig(f"{name} must be a number, got {value!r}")
        if kind is dict and not isinstance(value, dict):
            raise InvalidConfig(f"{name} must be a mapping, got {value!r}")
        if kind is str and not isinstance(value, str):
            raise InvalidConfig(f"{name} must be a string, got {value!r}")

    try:
        config = ServiceConfig(**values)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc
    config.validate()
    return config
