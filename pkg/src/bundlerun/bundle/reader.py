"""Streaming bundle parser.

Single pass over the outer archive: the manifest is validated first, the
data tree is spooled to disk (never held in memory), then its entry
headers are scanned for safety and indexed. The content digest covers the
exact bytes consumed from the stream.
"""

from __future__ import annotations

import gzip
import os
import tarfile
import tempfile
import zlib
from dataclasses import dataclass
from typing import BinaryIO

from bundlerun.bundle.digest import HashingReader
from bundlerun.bundle.manifest import (
    DATA_TREE_MEMBER,
    MANIFEST_MEMBER,
    BundleManifest,
    manifest_from_json,
)
from bundlerun.bundle.tree import TreeIndex, check_member
from bundlerun.errors import (
    InvalidManifest,
    MalformedArchive,
    MalformedDataTree,
    MissingManifest,
    SizeLimitExceeded,
)

DEFAULT_SIZE_LIMIT = 1024 * 1024 * 1024  # 1 GiB
MANIFEST_SIZE_CAP = 16 * 1024 * 1024

_COPY_CHUNK = 1024 * 1024


class _LimitedReader:
    """Raises SizeLimitExceeded once more than `limit` bytes have been read."""

    def __init__(self, stream: BinaryIO, limit: int):
        self._stream = stream
        self._limit = limit
        self._read = 0

    def read(self, n: int = -1) -> bytes:
        data = self._stream.read(n)
        self._read += len(data)
        if self._read > self._limit:
            raise SizeLimitExceeded(f"bundle exceeds the {self._limit}-byte limit")
        return data


@dataclass
class DataTreeHandle:
    """Spooled copy of the bundle's inner data archive plus its name index."""

    path: str
    size_bytes: int
    index: TreeIndex

    def open(self) -> BinaryIO:
        return open(self.path, "rb")

    def unlink(self) -> None:
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


@dataclass
class Bundle:
    manifest: BundleManifest
    data_tree: DataTreeHandle
    content_digest: str

    def close(self) -> None:
        self.data_tree.unlink()

    def __enter__(self) -> "Bundle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def scan_tree(tree_path: str) -> TreeIndex:
    """Stream the inner archive's headers, validating and indexing every entry."""
    index = TreeIndex()
    try:
        # GzipFile raises on truncation and checks the CRC trailer; tarfile's
        # own gz stream would silently stop at a cut, hiding missing entries
        with open(tree_path, "rb") as f, gzip.GzipFile(
            fileobj=f, mode="rb"
        ) as gz, tarfile.open(fileobj=gz, mode="r|") as tar:
            for member in tar:
                rel = check_member(member)
                index.add(member, rel)
            while gz.read(65536):  # drain so the trailer check actually runs
                pass
    except (tarfile.TarError, EOFError, OSError, zlib.error) as exc:
        raise MalformedDataTree(f"data tree archive is corrupt or truncated: {exc}") from exc
    return index


def _check_references(manifest: BundleManifest, index: TreeIndex) -> None:
    volatile = set(manifest.volatile_paths)
    for f in manifest.input_files:
        if f.path not in volatile and not index.has_path(f.path):
            raise InvalidManifest(
                f"input {f.logical_name!r} path {f.path!r} does not resolve inside the data tree"
            )
    for run in manifest.runs:
        if run.working_dir not in volatile and not index.has_path(run.working_dir):
            raise InvalidManifest(
                f"run {run.run_id!r} working_dir {run.working_dir!r} "
                "does not resolve inside the data tree"
            )
    for f in manifest.output_files:
        if f.path in volatile or index.has_path(f.path) or index.has_parent_dir(f.path):
            continue
        raise InvalidManifest(
            f"output {f.logical_name!r} path {f.path!r} has no location inside the data tree"
        )


def parse_bundle(
    stream: BinaryIO,
    *,
    size_limit: int = DEFAULT_SIZE_LIMIT,
    spool_dir: str | None = None,
) -> Bundle:
    """Parse and validate a bundle from a byte stream.

    The inner data archive is spooled to `spool_dir` (a temp file the
    returned Bundle owns; call close() when done). Peak memory stays
    bounded regardless of bundle size.
    """
    hasher = HashingReader(_LimitedReader(stream, size_limit))
    spool_fd, spool_path = tempfile.mkstemp(suffix=".tree.tar.gz", dir=spool_dir)
    tree_size = 0
    try:
        try:
            outer = tarfile.open(fileobj=hasher, mode="r|")
        except tarfile.TarError as exc:
            raise MalformedArchive(f"not a valid bundle archive: {exc}") from exc
        try:
            first = outer.next()
            if first is None:
                raise MalformedArchive("archive has no members")
            if first.name != MANIFEST_MEMBER:
                raise MissingManifest(
                    f"first member must be {MANIFEST_MEMBER!r}, found {first.name!r}"
                )
            if not first.isfile():
                raise MissingManifest(f"{MANIFEST_MEMBER!r} is not a regular file")
            if first.size > MANIFEST_SIZE_CAP:
                raise InvalidManifest(f"manifest exceeds {MANIFEST_SIZE_CAP} bytes")
            manifest_reader = outer.extractfile(first)
            assert manifest_reader is not None
            manifest = manifest_from_json(manifest_reader.read())

            second = outer.next()
            if second is None:
                raise MalformedArchive(f"archive lacks the {DATA_TREE_MEMBER!r} member")
            if second.name != DATA_TREE_MEMBER or not second.isfile():
                raise MalformedArchive(
                    f"second member must be {DATA_TREE_MEMBER!r}, found {second.name!r}"
                )
            tree_reader = outer.extractfile(second)
            assert tree_reader is not None
            with os.fdopen(spool_fd, "wb") as spool:
                spool_fd = -1
                while True:
                    chunk = tree_reader.read(_COPY_CHUNK)
                    if not chunk:
                        break
                    spool.write(chunk)
                    tree_size += len(chunk)

            extra = outer.next()
            if extra is not None:
                raise MalformedArchive(f"unexpected extra member {extra.name!r}")
            outer.close()
        except tarfile.TarError as exc:
            raise MalformedArchive(f"bundle archive is corrupt or truncated: {exc}") from exc

        # Drain any trailing padding so the digest covers every input byte.
        while hasher.read(_COPY_CHUNK):
            pass

        index = scan_tree(spool_path)
        _check_references(manifest, index)
    except BaseException:
        if spool_fd >= 0:
            os.close(spool_fd)
        try:
            os.unlink(spool_path)
        except FileNotFoundError:
            pass
        raise

    return Bundle(
        manifest=manifest,
        data_tree=DataTreeHandle(path=spool_path, size_bytes=tree_size, index=index),
        content_digest=hasher.hexdigest(),
    )
