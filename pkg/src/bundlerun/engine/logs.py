"""Append-only job logs: one writer (the executing worker), many readers.

Logs live as flat files in a shared directory so any replica can serve any
job's tail; at job end the executor copies the file to object storage.
"""

from __future__ import annotations

import os
import threading
import time

from bundlerun.errors import OffsetOutOfRange

TRUNCATION_MARKER = b"\n[log truncated: size cap reached]\n"

_POLL_INTERVAL = 0.1


class LogWriter:
    """Size-capped appender; usable directly as a sandbox log sink."""

    def __init__(self, path: str, cap: int):
        self._file = open(path, "ab")
        self._cap = cap
        self._written = self._file.tell()
        self._truncated = self._written >= cap
        self._lock = threading.Lock()

    @property
    def truncated(self) -> bool:
        return self._truncated

    def write(self, chunk: bytes) -> None:
        if not chunk:
            return
        with self._lock:
            if self._truncated:
                return
            room = self._cap - self._written
            if len(chunk) >= room:
                self._file.write(chunk[:room])
                self._file.write(TRUNCATION_MARKER)
                self._truncated = True
                self._written = self._cap
            else:
                self._file.write(chunk)
                self._written += len(chunk)
            self._file.flush()

    def line(self, text: str) -> None:
        self.write(text.encode("utf-8", "replace") + b"\n")

    def close(self) -> None:
        with self._lock:
            self._file.close()


class LogDir:
    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)

    def path(self, job_id: str) -> str:
        return os.path.join(self.root, f"{job_id}.log")

    def open_writer(self, job_id: str, cap: int) -> LogWriter:
        return LogWriter(self.path(job_id), cap)

    def size(self, job_id: str) -> int:
        try:
            return os.path.getsize(self.path(job_id))
        except FileNotFoundError:
            return 0

    def read(
        self,
        job_id: str,
        offset: int,
        *,
        is_live,
        wait_seconds: float = 0.0,
    ) -> tuple[bytes, int, bool]:
        """Return (chunk, next_offset, end_of_log) from `offset` onward.

        For live jobs an empty read blocks up to wait_seconds for more
        data (long-poll); end_of_log is only True once the job is terminal
        and the reader has consumed everything.
        """
        if offset < 0:
            raise OffsetOutOfRange("offset must be non-negative")
        deadline = time.monotonic() + wait_seconds
        while True:
            size = self.size(job_id)
            if offset > size:
                raise OffsetOutOfRange(f"offset {offset} beyond log size {size}")
            if size > offset:
                with open(self.path(job_id), "rb") as f:
                    f.seek(offset)
                    chunk = f.read(size - offset)
                return chunk, offset + len(chunk), False
            live = is_live()
            # re-check after the liveness read: the job may have flushed its
            # final lines between our size probe and going terminal
            if self.size(job_id) > offset:
                continue
            if not live:
                return b"", offset, True
            if time.monotonic() >= deadline:
                return b"", offset, False
            time.sleep(_POLL_INTERVAL)
