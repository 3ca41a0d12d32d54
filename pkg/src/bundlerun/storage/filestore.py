"""Filesystem object-store backend for development and single-node deploys.

Objects live under root/<bucket>/<key>. Writes land in a temp file and
are renamed into place, so a failed put never leaves a readable partial
object. Download URLs are HMAC-presigned and served by the API process.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import tempfile
import time
from typing import BinaryIO, Iterator
from urllib.parse import quote

from bundlerun.errors import TtlExceedsPolicy, UnknownObject
from bundlerun.storage import (
    STREAM_CHUNK,
    ArtifactRef,
    CappedReader,
    ObjectStore,
    check_key,
    make_key,
    verified_stream,
)


class FileStore(ObjectStore):
    def __init__(
        self,
        root: str,
        *,
        bucket: str = "artifacts",
        base_url: str = "http://localhost:8080",
        secret: str = "development-secret",
        max_presign_ttl: int = 7 * 24 * 3600,
    ):
        self.root = root
        self.bucket = bucket
        self.base_url = base_url.rstrip("/")
        self._secret = secret.encode()
        self.max_presign_ttl = max_presign_ttl
        os.makedirs(os.path.join(root, bucket), exist_ok=True)

    def _path(self, key: str) -> str:
        return os.path.join(self.root, self.bucket, *check_key(key).split("/"))

    def put_artifact(
        self,
        namespace: str,
        logical_name: str,
        stream: BinaryIO,
        *,
        content_type: str = "application/octet-stream",
        size_cap: int | None = None,
    ) -> ArtifactRef:
        key = make_key(namespace, logical_name)
        dest = self._path(key)
        os.makedirs(os.path.dirname(dest), exist_ok=True)
        reader = CappedReader(stream, size_cap)
        h = hashlib.sha256()
        size = 0
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(dest), prefix=".part-")
        try:
            with os.fdopen(fd, "wb") as out:
                while True:
                    chunk = reader.read(STREAM_CHUNK)
                    if not chunk:
                        break
                    h.update(chunk)
                    size += len(chunk)
                    out.write(chunk)
                out.flush()
                os.fsync(out.fileno())
            os.replace(tmp, dest)
        except BaseException:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
            raise
        return ArtifactRef(
            bucket=self.bucket,
            key=key,
            size_bytes=size,
            digest=h.hexdigest(),
            content_type=content_type,
        )

    def get_artifact(self, ref: ArtifactRef) -> Iterator[bytes]:
        path = self._path(ref.key)
        if not os.path.isfile(path):
            raise UnknownObject(f"no object at {ref.key!r}")

        def chunks() -> Iterator[bytes]:
            with open(path, "rb") as f:
                while True:
                    chunk = f.read(STREAM_CHUNK)
                    if not chunk:
                        break
                    yield chunk

        return verified_stream(chunks(), ref)

    def open_raw(self, key: str) -> BinaryIO:
        path = self._path(key)
        if not os.path.isfile(path):
            raise UnknownObject(f"no object at {key!r}")
        return open(path, "rb")

    def presign_download(self, ref: ArtifactRef, ttl_seconds: int) -> str:
        if ttl_seconds > self.max_presign_ttl:
            raise TtlExceedsPolicy(
                f"ttl {ttl_seconds}s exceeds the {self.max_presign_ttl}s maximum"
            )
        if not os.path.isfile(self._path(ref.key)):
            raise UnknownObject(f"no object at {ref.key!r}")
        expires = int(time.time()) + ttl_seconds
        sig = self._sign(ref.key, expires)
        return (
            f"{self.base_url}/api/blob/{quote(ref.key, safe='/._-')}"
            f"?expires={expires}&sig={sig}"
        )

    def verify_presigned(self, key: str, expires: int, sig: str, *, now: float | None = None) -> bool:
        if (now if now is not None else time.time()) > expires:
            return False
        return hmac.compare_digest(self._sign(key, expires), sig)

    def _sign(self, key: str, expires: int) -> str:
        msg = f"{key}\n{expires}".encode()
        return hmac.new(self._secret, msg, hashlib.sha256).hexdigest()

    def stream_key(self, key: str) -> tuple[Iterator[bytes], int]:
        """Raw read by key for serving verified presigned URLs."""
        path = self._path(key)
        try:
            size = os.path.getsize(path)
        except OSError:
            raise UnknownObject(f"no object at {key!r}") from None

        def chunks() -> Iterator[bytes]:
            with open(path, "rb") as f:
                while True:
                    piece = f.read(65536)
                    if not piece:
                        return
                    yield piece

        return chunks(), size

    def exists(self, key: str) -> bool:
        return os.path.isfile(self._path(key))

    def delete(self, key: str) -> None:
        try:
            os.unlink(self._path(key))
        except FileNotFoundError:
            pass
