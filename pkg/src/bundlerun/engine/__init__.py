"""Job execution: queue, state machine, log streaming, and the executor."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from bundlerun.errors import InvalidOverride, LimitsExceedPolicy

# hard ceilings a deployment cannot exceed, whatever its config says
GLOBAL_MAX_WALL_SECONDS = 6 * 3600

DEFAULT_WALL_SECONDS = 900
DEFAULT_MEMORY_BYTES = 2 * 1024 * 1024 * 1024
DEFAULT_LOG_CAP = 10 * 1024 * 1024
DEFAULT_OUTPUT_CAP = 512 * 1024 * 1024


@dataclass(frozen=True)
class ResourceLimits:
    wall_clock_seconds: int = DEFAULT_WALL_SECONDS
    memory_bytes: int = DEFAULT_MEMORY_BYTES
    log_bytes_cap: int = DEFAULT_LOG_CAP
    output_bytes_cap: int = DEFAULT_OUTPUT_CAP

    def validate(self, max_wall_seconds: int = GLOBAL_MAX_WALL_SECONDS) -> None:
        for name in (
            "wall_clock_seconds",
            "memory_bytes",
            "log_bytes_cap",
            "output_bytes_cap",
        ):
            if getattr(self, name) <= 0:
                raise LimitsExceedPolicy(f"limits.{name} must be positive")
        if self.wall_clock_seconds > max_wall_seconds:
            raise LimitsExceedPolicy(
                f"wall clock limit {self.wall_clock_seconds}s exceeds the "
                f"deployment maximum of {max_wall_seconds}s"
            )

    def to_json(self) -> str:
        return json.dumps(
            {
                "wall_clock_seconds": self.wall_clock_seconds,
                "memory_bytes": self.memory_bytes,
                "log_bytes_cap": self.log_bytes_cap,
                "output_bytes_cap": self.output_bytes_cap,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, raw: str) -> "ResourceLimits":
        return cls(**json.loads(raw))


@dataclass(frozen=True)
class RunOverrides:
    """Per-job edits: whole-argv replacement, env patches, input uploads.

    input_uploads maps a declared input's logical name to an upload id
    previously registered through the upload endpoint.
    """

    argv_replacements: dict[str, tuple[str, ...]] = field(default_factory=dict)
    env_patches: dict[str, dict[str, str]] = field(default_factory=dict)
    input_uploads: dict[str, str] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return bool(self.argv_replacements or self.env_patches or self.input_uploads)

    def validate(self, manifest) -> None:
        run_ids = {run.run_id for run in manifest.runs}
        input_names = {f.logical_name for f in manifest.input_files}
        for run_id in self.argv_replacements:
            if run_id not in run_ids:
                raise InvalidOverride(f"argv override names unknown run {run_id!r}")
        for run_id, patch in self.env_patches.items():
            if run_id not in run_ids:
                raise InvalidOverride(f"env override names unknown run {run_id!r}")
            for name in patch:
                if not name or "=" in name or "\0" in name:
                    raise InvalidOverride(f"invalid environment name {name!r}")
        for logical in self.input_uploads:
            if logical not in input_names:
                raise InvalidOverride(
                    f"input override names undeclared input {logical!r}"
                )
        for run_id, argv in self.argv_replacements.items():
            if not argv or not all(isinstance(a, str) and a for a in argv):
                raise InvalidOverride(f"replacement argv for {run_id!r} is empty")

    def to_json(self) -> str:
        return json.dumps(
            {
                "argv_replacements": {
                    k: list(v) for k, v in self.argv_replacements.items()
                },
                "env_patches": self.env_patches,
                "input_uploads": self.input_uploads,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, raw: str) -> "RunOverrides":
        data = json.loads(raw)
        return cls(
            argv_replacements={
                k: tuple(v) for k, v in data.get("argv_replacements", {}).items()
            },
            env_patches=data.get("env_patches", {}),
            input_uploads=data.get("input_uploads", {}),
        )


from bundlerun.engine.state import (  # noqa: E402
    JOB_STATES,
    TERMINAL_STATES,
    check_transition,
    is_terminal,
)
from bundlerun.engine.queue import JobQueue  # noqa: E402
from bundlerun.engine.logs import LogDir  # noqa: E402
from bundlerun.engine.executor import Executor  # noqa: E402
from bundlerun.engine.worker import WorkerPool  # noqa: E402

__all__ = [
    "ResourceLimits",
    "RunOverrides",
    "JOB_STATES",
    "TERMINAL_STATES",
    "check_transition",
    "is_terminal",
    "JobQueue",
    "LogDir",
    "Executor",
    "WorkerPool",
    "GLOBAL_MAX_WALL_SECONDS",
]
