"""Binary artifact storage behind an S3-compatible contract.

Two backends: `s3` speaks SigV4 against any compatible endpoint; `file`
keeps objects on the local filesystem and presigns HMAC download URLs
served by the API process. Keys are namespaced: uploads/, bundles/,
inputs/, logs/, outputs/<job_id>/<name>.
"""

from __future__ import annotations

import dataclasses
import hashlib
import re
from dataclasses import dataclass
from typing import BinaryIO, Iterator

from bundlerun.errors import DigestMismatch, SizeLimitExceeded

_KEY_GRAMMAR = re.compile(
    r"^(uploads/[A-Za-z0-9._\-]+"
    r"|bundles/[a-f0-9]{64}"
    r"|inputs/[A-Za-z0-9._\-]+/[^/]+"
    r"|logs/[A-Za-z0-9._\-]+"
    r"|outputs/[A-Za-z0-9._\-]+/[^/]+)$"
)

STREAM_CHUNK = 1024 * 1024


@dataclass(frozen=True)
class ArtifactRef:
    bucket: str
    key: str
    size_bytes: int
    digest: str
    content_type: str


def ref_to_json(ref: ArtifactRef) -> str:
    import json

    return json.dumps(dataclasses.asdict(ref), sort_keys=True)


def ref_from_json(raw: str) -> ArtifactRef:
    import json

    return ArtifactRef(**json.loads(raw))


def check_key(key: str) -> str:
    if not _KEY_GRAMMAR.match(key):
        raise ValueError(f"object key {key!r} violates the namespace grammar")
    return key


def make_key(namespace: str, logical_name: str) -> str:
    from urllib.parse import quote

    return check_key(f"{namespace}/{quote(logical_name, safe='._-')}")


class ObjectStore:
    """Backend contract; see FileStore and S3Store."""

    def put_artifact(
        self,
        namespace: str,
        logical_name: str,
        stream: BinaryIO,
        *,
        content_type: str = "application/octet-stream",
        size_cap: int | None = None,
    ) -> ArtifactRef:
        raise NotImplementedError

    def get_artifact(self, ref: ArtifactRef) -> Iterator[bytes]:
        raise NotImplementedError

    def presign_download(self, ref: ArtifactRef, ttl_seconds: int) -> str:
        raise NotImplementedError

    def exists(self, key: str) -> bool:
        raise NotImplementedError

    def delete(self, key: str) -> None:
        raise NotImplementedError

    # Convenience helpers shared by both backends.

    def put_bytes(self, namespace: str, logical_name: str, data: bytes, **kw) -> ArtifactRef:
        import io

        return self.put_artifact(namespace, logical_name, io.BytesIO(data), **kw)

    def get_bytes(self, ref: ArtifactRef) -> bytes:
        return b"".join(self.get_artifact(ref))


def verified_stream(chunks: Iterator[bytes], ref: ArtifactRef) -> Iterator[bytes]:
    """Yield chunks, checking size and digest once the stream is exhausted."""
    h = hashlib.sha256()
    total = 0
    for chunk in chunks:
        h.update(chunk)
        total += len(chunk)
        yield chunk
    if total != ref.size_bytes or h.hexdigest() != ref.digest:
        raise DigestMismatch(
            f"object {ref.key!r}: stored bytes do not match the recorded digest"
        )


class CappedReader:
    """Reader enforcing a byte cap; raises before the backend commits."""

    def __init__(self, stream: BinaryIO, cap: int | None):
        self._stream = stream
        self._cap = cap
        self._seen = 0

    def read(self, n: int = -1) -> bytes:
        data = self._stream.read(n)
        self._seen += len(data)
        if self._cap is not None and self._seen > self._cap:
            raise SizeLimitExceeded(f"stream exceeds the {self._cap}-byte cap")
        return data
