"""Process-isolation sandbox driven by the host kernel's own primitives.

A sandbox is an overlay mount over the image rootfs (copy fallback where
overlayfs is unavailable). Commands run chrooted into the merged view inside
fresh mount/PID — and by default network — namespaces, with memory enforced
by a per-run cgroup and wall time by a process-group timer. The PID namespace
guarantees nothing survives the run: when its init dies, the kernel reaps
every process inside.
"""

from __future__ import annotations

import logging
import os
import shutil
import signal
import subprocess
import tempfile
import threading
import time
from typing import Sequence
from uuid import uuid4

from bundlerun.backend import (
    TERM_COMPLETED,
    TERM_MEMORY,
    TERM_WALL,
    ContainerBackend,
    LogSink,
    RunOutcome,
    Sandbox,
)
from bundlerun.backend.cgroups import create_memory_cgroup
from bundlerun.backend.rootfs import copy_rootfs
from bundlerun.errors import PathTraversal, SandboxFailure

log = logging.getLogger(__name__)

_PUMP_CHUNK = 65536


class ProcessSandbox(Sandbox):
    def __init__(self, scratch: str, merged: str, mounted: bool, cgroup_prefix: str):
        self._scratch = scratch
        self.root = merged
        self._mounted = mounted
        self._cgroup_prefix = cgroup_prefix
        self._root_real = os.path.realpath(merged)
        self._proc_lock = threading.Lock()
        self._current: subprocess.Popen | None = None
        self._closed = False

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
        if self._closed:
            raise SandboxFailure("sandbox is closed")
        if not argv:
            raise SandboxFailure("empty command")
        cmd = ["unshare", "-m", "-p", "--fork", "--kill-child=SIGKILL",
               "--mount-proc=/proc"]
        if not network:
            cmd.append("-n")
        cmd += [f"--root={self.root}", f"--wd={cwd}", "--"] + list(argv)

        full_env = {
            "PATH": "/usr/local/bin:/usr/bin:/bin",
            "HOME": "/root",
            "LANG": "C.UTF-8",
            "TMPDIR": "/tmp",
            **(env or {}),
        }

        cgroup = None
        preexec = None
        if memory_bytes is not None:
            cgroup = create_memory_cgroup(
                f"{self._cgroup_prefix}-{uuid4().hex[:12]}", memory_bytes
            )
            procs_path = os.fsencode(cgroup.procs_path)

            def preexec():  # runs in the forked child, pre-exec: syscalls only
                fd = os.open(procs_path, os.O_WRONLY)
                os.write(fd, b"0")
                os.close(fd)

        started = time.monotonic()
        walled = False
        try:
            try:
                proc = subprocess.Popen(
                    cmd,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.STDOUT,
                    env=full_env,
                    cwd=self._scratch,
                    start_new_session=True,
                    preexec_fn=preexec,
                )
            except OSError as exc:
                raise SandboxFailure(f"cannot launch sandboxed command: {exc}") from exc
            with self._proc_lock:
                self._current = proc

            pump = threading.Thread(
                target=_pump_output, args=(proc.stdout, sink), daemon=True
            )
            pump.start()
            try:
                proc.wait(timeout=wall_seconds)
            except subprocess.TimeoutExpired:
                walled = True
                _terminate_group(proc, grace_seconds)
                proc.wait()
            pump.join(timeout=10)
            if proc.stdout is not None:
                proc.stdout.close()
            duration = time.monotonic() - started

            oomed = cgroup is not None and cgroup.oom_kills() > 0
            if walled:
                termination = TERM_WALL
            elif oomed:
                termination = TERM_MEMORY
            else:
                termination = TERM_COMPLETED
            rc = proc.returncode
            if rc < 0:
                rc = 128 - rc
            return RunOutcome(rc, termination, duration)
        finally:
            with self._proc_lock:
                self._current = None
            if cgroup is not None:
                cgroup.close()

    def host_path(self, container_path: str) -> str:
        """Map a container-absolute path to its host location.

        Symlinks resolve the way the kernel would inside the chroot:
        absolute targets re-root at the sandbox, ".." clamps at it. The
        result is under the sandbox root by construction.
        """
        if not container_path.startswith("/"):
            raise PathTraversal(f"{container_path!r} is not absolute")
        return _resolve_in_root(self._root_real, container_path)

    def kill_current(self) -> None:
        with self._proc_lock:
            proc = self._current
        if proc is not None and proc.poll() is None:
            _terminate_group(proc, grace_seconds=2.0)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.kill_current()
        if self._mounted:
            _unmount(self.root)
        shutil.rmtree(self._scratch, ignore_errors=True)


class ProcessBackend(ContainerBackend):
    def __init__(
        self,
        scratch_root: str | None = None,
        *,
        use_overlay: bool = True,
        cgroup_prefix: str = "bundlerun",
    ):
        for tool in ("unshare",) + (("mount", "umount") if use_overlay else ()):
            if shutil.which(tool) is None:
                raise SandboxFailure(f"host lacks required tool {tool!r}")
        self._scratch_root = scratch_root
        self._use_overlay = use_overlay
        self._cgroup_prefix = cgroup_prefix
        if scratch_root:
            os.makedirs(scratch_root, exist_ok=True)

    def create_sandbox(self, image_rootfs: str) -> ProcessSandbox:
        if not os.path.isdir(image_rootfs):
            raise SandboxFailure(f"image rootfs {image_rootfs!r} is not a directory")
        scratch = tempfile.mkdtemp(prefix="sbx-", dir=self._scratch_root)
        upper = os.path.join(scratch, "upper")
        work = os.path.join(scratch, "work")
        merged = os.path.join(scratch, "merged")
        for d in (upper, work, merged):
            os.mkdir(d)
        mounted = False
        try:
            if self._use_overlay:
                mounted = _try_overlay(image_rootfs, upper, work, merged)
            if not mounted:
                copy_rootfs(image_rootfs, merged)
            # runs rely on these even if the image tree lost them
            os.makedirs(os.path.join(merged, "proc"), exist_ok=True)
            os.makedirs(os.path.join(merged, "tmp"), exist_ok=True)
        except BaseException:
            if mounted:
                _unmount(merged)
            shutil.rmtree(scratch, ignore_errors=True)
            raise
        return ProcessSandbox(scratch, merged, mounted, self._cgroup_prefix)


def _try_overlay(lower: str, upper: str, work: str, merged: str) -> bool:
    paths = (lower, upper, work)
    if any(":" in p or "," in p for p in paths):
        return False  # overlay option syntax cannot express these paths
    opts = f"lowerdir={lower},upperdir={upper},workdir={work}"
    proc = subprocess.run(
        ["mount", "-t", "overlay", "overlay", "-o", opts, merged],
        capture_output=True,
        text=True,
    )
    if proc.returncode != 0:
        log.info("overlay mount unavailable (%s); copying image", proc.stderr.strip())
        return False
    return True


def _unmount(merged: str) -> None:
    for _ in range(5):
        proc = subprocess.run(["umount", merged], capture_output=True)
        if proc.returncode == 0:
            return
        time.sleep(0.1)
    subprocess.run(["umount", "-l", merged], capture_output=True)


def _terminate_group(proc: subprocess.Popen, grace_seconds: float) -> None:
    try:
        pgid = os.getpgid(proc.pid)
    except ProcessLookupError:
        return
    try:
        os.killpg(pgid, signal.SIGTERM)
    except ProcessLookupError:
        return
    deadline = time.monotonic() + grace_seconds
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            break
        time.sleep(0.05)
    try:
        os.killpg(pgid, signal.SIGKILL)
    except ProcessLookupError:
        pass


def _resolve_in_root(root_real: str, container_path: str, max_links: int = 40) -> str:
    pending = [c for c in container_path.split("/") if c and c != "."]
    pending.reverse()
    resolved = root_real
    links = 0
    while pending:
        comp = pending.pop()
        if comp == "..":
            if resolved != root_real:
                resolved = os.path.dirname(resolved)
            continue
        candidate = os.path.join(resolved, comp)
        if os.path.islink(candidate):
            links += 1
            if links > max_links:
                raise PathTraversal(
                    f"{container_path!r}: too many levels of symbolic links"
                )
            target = os.readlink(candidate)
            if target.startswith("/"):
                resolved = root_real
            pending.extend(
                reversed([c for c in target.split("/") if c and c != "."])
            )
            continue
        resolved = candidate
    return resolved


def _pump_output(pipe, sink: LogSink | None) -> None:
    try:
        while True:
            chunk = pipe.read(_PUMP_CHUNK)
            if not chunk:
                return
            if sink is not None:
                sink.write(chunk)
    except (OSError, ValueError):
        return
