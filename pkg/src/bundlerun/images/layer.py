"""Deterministic image-layer archives.

pack_layer serializes a rootfs directory so equal trees give equal bytes:
fixed member order, zeroed timestamps, fixed ownership, gzip with a pinned
level and no embedded mtime. Unlike bundle data trees, image layers may
legitimately carry device nodes, so extraction has its own guards instead
of reusing the bundle-tree rules.
"""

from __future__ import annotations

import gzip
import os
import stat
import tarfile
import zlib
from typing import BinaryIO

from bundlerun.errors import MalformedDataTree, PathTraversal

_GZIP_LEVEL = 6


def pack_layer(rootfs: str, out: BinaryIO) -> None:
    # filename="" keeps the gzip header free of the output path
    gz = gzip.GzipFile(
        filename="", fileobj=out, mode="wb", compresslevel=_GZIP_LEVEL, mtime=0
    )
    with tarfile.open(fileobj=gz, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        for rel in _walk_sorted(rootfs):
            full = os.path.join(rootfs, rel)
            st = os.lstat(full)
            info = tarfile.TarInfo(name=rel)
            info.mode = stat.S_IMODE(st.st_mode)
            info.mtime = 0
            info.uid = info.gid = 0
            info.uname = info.gname = ""
            if stat.S_ISDIR(st.st_mode):
                info.type = tarfile.DIRTYPE
                tar.addfile(info)
            elif stat.S_ISLNK(st.st_mode):
                info.type = tarfile.SYMTYPE
                info.linkname = os.readlink(full)
                tar.addfile(info)
            elif stat.S_ISCHR(st.st_mode) or stat.S_ISBLK(st.st_mode):
                info.type = (
                    tarfile.CHRTYPE if stat.S_ISCHR(st.st_mode) else tarfile.BLKTYPE
                )
                info.devmajor = os.major(st.st_rdev)
                info.devminor = os.minor(st.st_rdev)
                tar.addfile(info)
            elif stat.S_ISFIFO(st.st_mode):
                info.type = tarfile.FIFOTYPE
                tar.addfile(info)
            elif stat.S_ISREG(st.st_mode):
                info.size = st.st_size
                with open(full, "rb") as f:
                    tar.addfile(info, f)
            # sockets and anything else have no place in an image
    gz.close()


def extract_layer(archive: BinaryIO, dest: str) -> None:
    dest_real = os.path.realpath(dest)
    os.makedirs(dest_real, exist_ok=True)
    # GzipFile (unlike tarfile's own gz stream) raises on a truncated stream
    # and verifies the CRC trailer, so a cut archive can't silently extract
    # as a shorter tree.
    try:
        gz = gzip.GzipFile(fileobj=archive, mode="rb")
        with tarfile.open(fileobj=gz, mode="r|") as tar:
            for member in tar:
                _extract_member(tar, member, dest_real)
        while gz.read(65536):  # drain so the trailer check actually runs
            pass
    except (tarfile.TarError, EOFError, gzip.BadGzipFile, zlib.error) as exc:
        raise MalformedDataTree(f"corrupt image layer: {exc}") from exc


def _extract_member(tar, member: tarfile.TarInfo, dest_real: str) -> None:
    rel = _check_rel(member.name)
    target = os.path.join(dest_real, rel)
    parent = os.path.dirname(target)
    if os.path.realpath(parent) != parent or not (
        parent == dest_real or parent.startswith(dest_real + os.sep)
    ):
        raise PathTraversal(f"layer member {member.name!r} escapes the image root")
    os.makedirs(parent, exist_ok=True)
    if os.path.lexists(target) and not (member.isdir() and os.path.isdir(target)):
        os.unlink(target)
    if member.isdir():
        os.makedirs(target, exist_ok=True)
        os.chmod(target, member.mode)
    elif member.issym():
        os.symlink(member.linkname, target)
    elif member.isfile():
        src = tar.extractfile(member)
        assert src is not None
        flags = os.O_WRONLY | os.O_CREAT | os.O_EXCL | getattr(os, "O_NOFOLLOW", 0)
        fd = os.open(target, flags, member.mode)
        try:
            with os.fdopen(fd, "wb") as out:
                while True:
                    chunk = src.read(1024 * 1024)
                    if not chunk:
                        break
                    out.write(chunk)
        except BaseException:
            os.unlink(target)
            raise
    elif member.ischr() or member.isblk():
        kind = stat.S_IFCHR if member.ischr() else stat.S_IFBLK
        try:
            os.mknod(target, kind | member.mode, os.makedev(member.devmajor, member.devminor))
        except OSError:
            pass  # unprivileged extraction loses device nodes, nothing else
    elif member.isfifo():
        os.mkfifo(target, member.mode)
    else:
        raise MalformedDataTree(
            f"layer member {member.name!r} has unsupported type {member.type!r}"
        )


def _check_rel(name: str) -> str:
    rel = name.lstrip("/")
    parts = [p for p in rel.split("/") if p not in ("", ".")]
    if any(p == ".." for p in parts):
        raise PathTraversal(f"layer member {name!r} uses '..'")
    return "/".join(parts)


def _walk_sorted(rootfs: str):
    entries = []
    for dirpath, dirnames, filenames in os.walk(rootfs):
        rel_dir = os.path.relpath(dirpath, rootfs)
        if rel_dir != ".":
            entries.append(rel_dir)
        for name in filenames:
            entries.append(os.path.join(rel_dir, name) if rel_dir != "." else name)
        # symlinked dirs show up in dirnames but must not be descended into
        for name in list(dirnames):
            full = os.path.join(dirpath, name)
            if os.path.islink(full):
                dirnames.remove(name)
                entries.append(
                    os.path.join(rel_dir, name) if rel_dir != "." else name
                )
    return sorted(e.replace(os.sep, "/") for e in entries)
