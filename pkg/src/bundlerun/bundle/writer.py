"""Fixture bundle writer.

Test and development tooling only: real experiment packing is a separate
concern. Output is canonical and deterministic — fixed member order
(manifest first, data tree second), zeroed timestamps, uid/gid 0, gzip
mtime 0 — so equal inputs produce byte-identical bundles and stable
content digests.
"""

from __future__ import annotations

import gzip
import io
import posixpath
import tarfile
import tempfile
from dataclasses import dataclass
from typing import BinaryIO, Mapping, Union

from bundlerun.bundle.manifest import (
    DATA_TREE_MEMBER,
    MANIFEST_MEMBER,
    BundleManifest,
    manifest_to_canonical_json,
)
from bundlerun.bundle.tree import link_escapes
from bundlerun.errors import InconsistentManifest, PathTraversal

_FILL_CHUNK = 1024 * 1024


@dataclass(frozen=True)
class File:
    """Regular file entry; synthetic content via size+fill for large fixtures."""

    data: bytes | None = None
    mode: int = 0o644
    size: int | None = None
    fill: bytes = b"\0"

    def length(self) -> int:
        return len(self.data) if self.data is not None else int(self.size or 0)


@dataclass(frozen=True)
class Dir:
    mode: int = 0o755


@dataclass(frozen=True)
class Symlink:
    target: str


Entry = Union[bytes, File, Dir, Symlink]


def _zeroed(info: tarfile.TarInfo) -> tarfile.TarInfo:
    info.mtime = 0
    info.uid = 0
    info.gid = 0
    info.uname = ""
    info.gname = ""
    return info


def _normalize_entries(files: Mapping[str, Entry]) -> dict[str, Entry]:
    entries: dict[str, Entry] = {}
    for path, entry in files.items():
        if not path.startswith("/") or path != posixpath.normpath(path):
            raise PathTraversal(f"fixture path {path!r} must be absolute and normalized")
        if "/../" in f"{path}/" or path.split("/").count("..") > 0:
            raise PathTraversal(f"fixture path {path!r} contains '..'")
        entries[path] = bytes(entry) if isinstance(entry, (bytes, bytearray)) else entry
    # Auto-create missing parent directories.
    for path in list(entries):
        parent = posixpath.dirname(path)
        while parent != "/":
            entries.setdefault(parent, Dir())
            parent = posixpath.dirname(parent)
    return entries


def _check_consistency(manifest: BundleManifest, entries: dict[str, Entry]) -> None:
    volatile = set(manifest.volatile_paths)

    def present(path: str) -> bool:
        return path == "/" or path in entries

    for f in manifest.input_files:
        if f.path not in volatile and not present(f.path):
            raise InconsistentManifest(f"input {f.logical_name!r} references missing {f.path!r}")
    for run in manifest.runs:
        if run.working_dir not in volatile and not present(run.working_dir):
            raise InconsistentManifest(
                f"run {run.run_id!r} working_dir {run.working_dir!r} missing from files"
            )
    for f in manifest.output_files:
        if f.path in volatile or present(f.path):
            continue
        parent = posixpath.dirname(f.path)
        if not present(parent):
            raise InconsistentManifest(
                f"output {f.logical_name!r} path {f.path!r} has no parent directory in files"
            )


def _write_tree(entries: dict[str, Entry], out: BinaryIO) -> None:
    # filename="" keeps the gzip header free of the output path
    gz = gzip.GzipFile(filename="", fileobj=out, mode="wb", compresslevel=6, mtime=0)
    tar = tarfile.open(fileobj=gz, mode="w", format=tarfile.USTAR_FORMAT)
    try:
        for path in sorted(entries):
            entry = entries[path]
            rel = path.lstrip("/")
            if isinstance(entry, Dir):
                info = _zeroed(tarfile.TarInfo(rel))
                info.type = tarfile.DIRTYPE
                info.mode = entry.mode
                tar.addfile(info)
            elif isinstance(entry, Symlink):
                if link_escapes(rel, entry.target):
                    raise PathTraversal(
                        f"symlink {path!r} -> {entry.target!r} resolves outside the tree"
                    )
                info = _zeroed(tarfile.TarInfo(rel))
                info.type = tarfile.SYMTYPE
                info.linkname = entry.target
                info.mode = 0o777
                tar.addfile(info)
            else:
                spec = entry if isinstance(entry, File) else File(data=entry)
                info = _zeroed(tarfile.TarInfo(rel))
                info.type = tarfile.REGTYPE
                info.mode = spec.mode
                info.size = spec.length()
                if spec.data is not None:
                    tar.addfile(info, io.BytesIO(spec.data))
                else:
                    tar.addfile(info, _FillReader(info.size, spec.fill))
    finally:
        tar.close()
        gz.close()


class _FillReader:
    """Readable yielding `size` bytes of a repeating fill pattern."""

    def __init__(self, size: int, fill: bytes):
        self._left = size
        self._fill = fill or b"\0"
        self._pos = 0

    def read(self, n: int = -1) -> bytes:
        if self._left <= 0:
            return b""
        take = self._left if n < 0 else min(n, self._left, _FILL_CHUNK)
        fill = self._fill
        start = self._pos % len(fill)
        reps = (start + take) // len(fill) + 1
        data = (fill * reps)[start:start + take]
        self._pos += take
        self._left -= take
        return data


def pack_fixture_bundle(
    manifest: BundleManifest,
    files: Mapping[str, Entry],
    out: BinaryIO | None = None,
) -> bytes | None:
    """Emit canonical bundle bytes; returns them unless `out` is given."""
    manifest.validate()
    entries = _normalize_entries(files)
    _check_consistency(manifest, entries)

    manifest_bytes = manifest_to_canonical_json(manifest)

    with tempfile.TemporaryFile() as tree_spool:
        _write_tree(entries, tree_spool)
        tree_size = tree_spool.tell()
        tree_spool.seek(0)

        sink: BinaryIO = out if out is not None else io.BytesIO()
        outer = tarfile.open(fileobj=sink, mode="w", format=tarfile.USTAR_FORMAT)
        try:
            info = _zeroed(tarfile.TarInfo(MANIFEST_MEMBER))
            info.size = len(manifest_bytes)
            info.mode = 0o644
            outer.addfile(info, io.BytesIO(manifest_bytes))

            info = _zeroed(tarfile.TarInfo(DATA_TREE_MEMBER))
            info.size = tree_size
            info.mode = 0o644
            outer.addfile(info, tree_spool)
        finally:
            outer.close()

    if out is None:
        return sink.getvalue()  # type: ignore[union-attr]
    return None
