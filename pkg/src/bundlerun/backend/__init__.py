"""Execution backends: isolated sandboxes for replaying recorded commands.

A backend materializes an image rootfs into a writable sandbox and executes
commands inside it under resource limits. One sandbox instance hosts all the
runs of a job, in order, so files written by one run are visible to the next
— the same contract a single container instance would give.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

TERM_COMPLETED = "completed"
TERM_WALL = "wall_limit"
TERM_MEMORY = "memory_limit"
TERM_CANCELLED = "cancelled"

TERMINATIONS = (TERM_COMPLETED, TERM_WALL, TERM_MEMORY, TERM_CANCELLED)


@dataclass(frozen=True)
class RunOutcome:
    exit_code: int
    termination: str
    duration_seconds: float


class LogSink(Protocol):
    def write(self, chunk: bytes) -> None: ...


class Sandbox:
    """A writable instance of an image; see ProcessSandbox."""

    root: str

    def execute(
        self,
        argv: Sequence[str],
        *,
        cwd: str = "/",
        env: dict[str, str] | None = None,
        wall_seconds: float = 900.0,
        memory_bytes: int | None = None,
        network: bool = False,
        grace_seconds: float = 10.0,
        sink: LogSink | None = None,
    ) -> RunOutcome:
        raise NotImplementedError

    def host_path(self, container_path: str) -> str:
        raise NotImplementedError

    def kill_current(self) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self) -> "Sandbox":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class ContainerBackend:
    def create_sandbox(self, image_rootfs: str) -> Sandbox:
        raise NotImplementedError
