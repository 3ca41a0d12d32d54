"""SQLite access shared by the service modules.

One Database owns one file. Connections are per-thread (sqlite3 objects
must not cross threads) with WAL enabled so readers never block the writer.
Claim-style updates use BEGIN IMMEDIATE to take the write lock up front.
"""

from __future__ import annotations

import os
import sqlite3
import threading
from contextlib import contextmanager
from typing import Iterator

SCHEMA = (
    """
    CREATE TABLE IF NOT EXISTS images (
        bundle_digest  TEXT PRIMARY KEY,
        image_digest   TEXT NOT NULL,
        registry_ref   TEXT NOT NULL,
        built_at       REAL NOT NULL,
        last_used_at   REAL NOT NULL,
        size_bytes     INTEGER NOT NULL
    )
    """,
    """
    CREATE TABLE IF NOT EXISTS uploads (
        upload_id      TEXT PRIMARY KEY,
        ref_json       TEXT NOT NULL,
        filename       TEXT NOT NULL,
        size_bytes     INTEGER NOT NULL,
        content_digest TEXT NOT NULL,
        created_at     REAL NOT NULL
    )
    """,
    """
    CREATE TABLE IF NOT EXISTS reproductions (
        repro_id       TEXT PRIMARY KEY,
        short_id       TEXT,
        canonical_path TEXT NOT NULL,
        source_kind    TEXT NOT NULL,
        source_ref     TEXT NOT NULL,
        bundle_digest  TEXT NOT NULL,
        bundle_ref     TEXT NOT NULL,
        summary_json   TEXT NOT NULL DEFAULT '{}',
        created_at     REAL NOT NULL,
        current        INTEGER NOT NULL DEFAULT 1,
        superseded_by  TEXT
    )
    """,
    """
    CREATE UNIQUE INDEX IF NOT EXISTS idx_repro_short
        ON reproductions(short_id) WHERE short_id IS NOT NULL AND current = 1
    """,
    """
    CREATE UNIQUE INDEX IF NOT EXISTS idx_repro_path
        ON reproductions(canonical_path) WHERE current = 1
    """,
    """
    CREATE TABLE IF NOT EXISTS jobs (
        job_id         TEXT PRIMARY KEY,
        repro_id       TEXT NOT NULL,
        state          TEXT NOT NULL,
        created_at     REAL NOT NULL,
        started_at     REAL,
        finished_at    REAL,
        termination    TEXT,
        selection_json TEXT NOT NULL DEFAULT '[]',
        limits_json    TEXT NOT NULL DEFAULT '{}',
        runs_json      TEXT NOT NULL DEFAULT '[]',
        overrides_json TEXT NOT NULL DEFAULT '{}',
        outputs_json   TEXT NOT NULL DEFAULT '[]',
        error          TEXT,
        worker         TEXT,
        log_ref        TEXT
    )
    """,
    """
    CREATE INDEX IF NOT EXISTS idx_jobs_state ON jobs(state, created_at)
    """,
)


class Database:
    def __init__(self, path: str):
        self.path = path
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        self._local = threading.local()
        with self.tx() as conn:
            for ddl in SCHEMA:
                conn.execute(ddl)

    def connect(self) -> sqlite3.Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = sqlite3.connect(self.path, timeout=30.0)
            conn.row_factory = sqlite3.Row
            conn.execute("PRAGMA journal_mode=WAL")
            conn.execute("PRAGMA synchronous=NORMAL")
            conn.execute("PRAGMA foreign_keys=ON")
            self._local.conn = conn
        return conn

    @contextmanager
    def tx(self, *, immediate: bool = False) -> Iterator[sqlite3.Connection]:
        conn = self.connect()
        conn.execute("BEGIN IMMEDIATE" if immediate else "BEGIN")
        try:
            yield conn
        except BaseException:
            conn.rollback()
            raise
        else:
            conn.commit()

    def close(self) -> None:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
            self._local.conn = None
