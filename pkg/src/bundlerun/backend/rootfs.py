"""Minimal base rootfs provisioning.

Builds a self-contained root filesystem from the host's own POSIX userland:
a shell plus the common text/file utilities, with their shared-library
closure resolved via ldd and copied to the literal paths the binaries
reference. The result is small, has no package manager, and is enough to
replay shell-driven experiments whose own files arrive with the bundle.
"""

from __future__ import annotations

import logging
import os
import re
import shutil
import stat
import subprocess

from bundlerun.errors import SandboxFailure

log = logging.getLogger(__name__)

BASE_TOOLS = (
    "sh", "dash", "env", "cat", "cp", "mv", "rm", "mkdir", "rmdir", "ls",
    "ln", "chmod", "touch", "seq", "awk", "tr", "head", "tail", "wc",
    "sort", "uniq", "cut", "grep", "sed", "sleep", "date", "true", "false",
    "pwd", "dirname", "basename", "mktemp", "mkfifo", "tee", "printf", "echo",
    "test", "expr", "od", "xargs", "find", "du", "stat", "cmp", "diff",
    "gzip", "gunzip", "tar", "sha256sum", "md5sum",
)

REQUIRED_TOOLS = ("sh",)

_LDD_PATH = re.compile(r"=>\s*(/\S+)\s|^\s*(/\S+)\s+\(")

# device nodes the shell and common tools expect; (name, major, minor)
_DEV_NODES = (
    ("null", 1, 3),
    ("zero", 1, 5),
    ("full", 1, 7),
    ("random", 1, 8),
    ("urandom", 1, 9),
)


def provision_base_rootfs(dest: str, tools: tuple[str, ...] = BASE_TOOLS) -> None:
    """Populate `dest` with a minimal runnable root filesystem."""
    for rel, mode in (
        ("usr/bin", 0o755),
        ("usr/local/bin", 0o755),
        ("etc", 0o755),
        ("dev", 0o755),
        ("proc", 0o555),
        ("root", 0o700),
        ("tmp", 0o1777),
        ("var/tmp", 0o1777),
    ):
        path = os.path.join(dest, rel)
        os.makedirs(path, exist_ok=True)
        os.chmod(path, mode)
    for link in ("bin", "sbin"):
        target = os.path.join(dest, link)
        if not os.path.lexists(target):
            os.symlink("usr/bin", target)

    libs: set[str] = set()
    copied_any = False
    for tool in tools:
        source = shutil.which(tool)
        if source is None:
            if tool in REQUIRED_TOOLS:
                raise SandboxFailure(f"host lacks required tool {tool!r}")
            log.debug("host lacks optional tool %s; skipping", tool)
            continue
        real = os.path.realpath(source)
        target = os.path.join(dest, "usr/bin", tool)
        shutil.copy2(real, target)
        os.chmod(target, 0o755)
        libs.update(_library_closure(real))
        copied_any = True
    if not copied_any:
        raise SandboxFailure("no usable tools found on the host")

    for lib in sorted(libs):
        target = os.path.join(dest, lib.lstrip("/"))
        os.makedirs(os.path.dirname(target), exist_ok=True)
        if not os.path.exists(target):
            shutil.copy2(os.path.realpath(lib), target)

    _write_file(dest, "etc/passwd", "root:x:0:0:root:/root:/bin/sh\n")
    _write_file(dest, "etc/group", "root:x:0:\n")
    _write_file(dest, "etc/hosts", "127.0.0.1\tlocalhost\n")
    _write_file(dest, "etc/resolv.conf", "")

    for name, major, minor in _DEV_NODES:
        node = os.path.join(dest, "dev", name)
        if os.path.exists(node):
            continue
        try:
            os.mknod(node, stat.S_IFCHR | 0o666, os.makedev(major, minor))
        except OSError:
            if name == "null":
                # degraded but workable stand-in for unprivileged hosts
                _write_file(dest, "dev/null", "")
                log.warning("mknod unavailable; /dev/null is a plain file")


def copy_rootfs(src: str, dst: str) -> None:
    """Copy a rootfs tree preserving symlinks and device nodes.

    Device nodes must be re-created with mknod, never content-copied:
    reading /dev/full or /dev/random yields endless bytes and would fill
    the disk.
    """
    shutil.copytree(
        src, dst, symlinks=True, dirs_exist_ok=True, copy_function=_copy_entry
    )


def _copy_entry(src: str, dst: str, *, follow_symlinks: bool = True) -> None:
    st = os.stat(src, follow_symlinks=False)
    if stat.S_ISCHR(st.st_mode) or stat.S_ISBLK(st.st_mode):
        try:
            os.mknod(dst, st.st_mode, st.st_rdev)
        except OSError:
            log.warning("cannot replicate device node %s; skipped", src)
    elif stat.S_ISFIFO(st.st_mode):
        os.mkfifo(dst, st.st_mode & 0o7777)
    else:
        shutil.copy2(src, dst)


def _library_closure(binary: str) -> set[str]:
    try:
        proc = subprocess.run(
            ["ldd", binary], capture_output=True, text=True, timeout=30
        )
    except (OSError, subprocess.TimeoutExpired):
        return set()
    if proc.returncode != 0:  # statically linked
        return set()
    found = set()
    for line in proc.stdout.splitlines():
        match = _LDD_PATH.search(line)
        if match:
            found.add(match.group(1) or match.group(2))
    return found


def _write_file(dest: str, rel: str, content: str) -> None:
    with open(os.path.join(dest, rel), "w") as f:
        f.write(content)
