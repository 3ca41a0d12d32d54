"""Content digests: streaming SHA-256, lowercase hex, platform-stable."""

from __future__ import annotations

import hashlib
from typing import BinaryIO

CHUNK = 1024 * 1024

EMPTY_DIGEST = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def content_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_stream(stream: BinaryIO) -> str:
    h = hashlib.sha256()
    while True:
        chunk = stream.read(CHUNK)
        if not chunk:
            break
        h.update(chunk)
    return h.hexdigest()


def digest_file(path: str) -> str:
    with open(path, "rb") as f:
        return digest_stream(f)


class HashingReader:
    """Wraps a readable stream, hashing and counting every byte that passes."""

    def __init__(self, stream: BinaryIO):
        self._stream = stream
        self._hash = hashlib.sha256()
        self.bytes_read = 0

    def read(self, n: int = -1) -> bytes:
        data = self._stream.read(n)
        if data:
            self._hash.update(data)
            self.bytes_read += len(data)
        return data

    def hexdigest(self) -> str:
        return self._hash.hexdigest()
