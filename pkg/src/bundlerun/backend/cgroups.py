"""Memory-limited cgroup handles, covering both the v1 and v2 layouts."""

from __future__ import annotations

import logging
import os
import time

from bundlerun.errors import SandboxFailure

log = logging.getLogger(__name__)

V1_MEMORY_ROOT = "/sys/fs/cgroup/memory"
V2_ROOT = "/sys/fs/cgroup"


class MemoryCgroup:
    def __init__(self, path: str, procs_path: str, version: int):
        self.path = path
        self.procs_path = procs_path
        self.version = version

    def oom_kills(self) -> int:
        try:
            if self.version == 1:
                stats = _read(os.path.join(self.path, "memory.oom_control"))
            else:
                stats = _read(os.path.join(self.path, "memory.events"))
        except OSError:
            return 0
        for line in stats.splitlines():
            name, _, value = line.partition(" ")
            if name == "oom_kill":
                return int(value)
        return 0

    def close(self) -> None:
        # rmdir fails with EBUSY until the last member is reaped
        for _ in range(20):
            try:
                os.rmdir(self.path)
                return
            except FileNotFoundError:
                return
            except OSError:
                time.sleep(0.05)
        log.warning("leaking cgroup %s: still busy", self.path)


def supported() -> bool:
    return _v1_available() or _v2_available()


def create_memory_cgroup(name: str, limit_bytes: int) -> MemoryCgroup:
    if _v1_available():
        return _create_v1(name, limit_bytes)
    if _v2_available():
        return _create_v2(name, limit_bytes)
    raise SandboxFailure(
        "cannot enforce the memory limit: no writable memory cgroup controller"
    )


def _v1_available() -> bool:
    return os.path.isfile(os.path.join(V1_MEMORY_ROOT, "memory.limit_in_bytes"))


def _v2_available() -> bool:
    controllers = os.path.join(V2_ROOT, "cgroup.controllers")
    try:
        return "memory" in _read(controllers).split()
    except OSError:
        return False


def _create_v1(name: str, limit_bytes: int) -> MemoryCgroup:
    path = os.path.join(V1_MEMORY_ROOT, name)
    try:
        os.makedirs(path, exist_ok=True)
        _write(os.path.join(path, "memory.limit_in_bytes"), str(limit_bytes))
    except OSError as exc:
        raise SandboxFailure(f"cannot set up memory cgroup: {exc}") from exc
    try:
        # cap swap too so the limit cannot be dodged by swapping out
        _write(os.path.join(path, "memory.memsw.limit_in_bytes"), str(limit_bytes))
    except OSError:
        pass
    return MemoryCgroup(path, os.path.join(path, "cgroup.procs"), version=1)


def _create_v2(name: str, limit_bytes: int) -> MemoryCgroup:
    try:
        _write(os.path.join(V2_ROOT, "cgroup.subtree_control"), "+memory")
    except OSError:
        pass
    path = os.path.join(V2_ROOT, name)
    try:
        os.makedirs(path, exist_ok=True)
        _write(os.path.join(path, "memory.max"), str(limit_bytes))
    except OSError as exc:
        raise SandboxFailure(f"cannot set up memory cgroup: {exc}") from exc
    try:
        _write(os.path.join(path, "memory.swap.max"), "0")
    except OSError:
        pass
    return MemoryCgroup(path, os.path.join(path, "cgroup.procs"), version=2)


def _read(path: str) -> str:
    with open(path, "r") as f:
        return f.read()


def _write(path: str, value: str) -> None:
    with open(path, "w") as f:
        f.write(value)
