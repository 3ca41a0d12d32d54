"""Persistent FIFO job queue over SQLite.

Claims take the write lock up front (BEGIN IMMEDIATE) so two workers can
never claim the same job; every state change passes through the transition
table inside the same transaction that reads the current state.
"""

from __future__ import annotations

import json
import threading
import time
from typing import Callable
from uuid import uuid4

from bundlerun.db import Database
from bundlerun.engine import ResourceLimits, RunOverrides
from bundlerun.engine.state import check_transition, is_terminal
from bundlerun.errors import InvalidOverride, UnknownJob

_CANCELLABLE = ("QUEUED", "BUILDING", "RUNNING")


class JobQueue:
    def __init__(self, db: Database, *, max_wall_seconds: int | None = None):
        self._db = db
        self._max_wall = max_wall_seconds
        self._cancellers: dict[str, Callable[[], None]] = {}
        self._cancel_lock = threading.Lock()

    # -- submission -----------------------------------------------------

    def submit(
        self,
        repro_id: str,
        manifest,
        *,
        run_selection: tuple[str, ...] = (),
        overrides: RunOverrides | None = None,
        limits: ResourceLimits | None = None,
    ) -> str:
        overrides = overrides or RunOverrides()
        limits = limits or ResourceLimits()
        if self._max_wall is not None:
            limits.validate(self._max_wall)
        else:
            limits.validate()

        known = {run.run_id for run in manifest.runs}
        for run_id in run_selection:
            if run_id not in known:
                raise InvalidOverride(f"run selection names unknown run {run_id!r}")
        if len(set(run_selection)) != len(run_selection):
            raise InvalidOverride("run selection repeats a run id")
        if not run_selection:
            run_selection = tuple(run.run_id for run in manifest.runs)
        overrides.validate(manifest)
        self._check_uploads(overrides)

        job_id = uuid4().hex[:12]
        with self._db.tx(immediate=True) as tx:
            tx.execute(
                "INSERT INTO jobs (job_id, repro_id, state, created_at,"
                " selection_json, limits_json, overrides_json)"
                " VALUES (?, ?, 'QUEUED', ?, ?, ?, ?)",
                (
                    job_id,
                    repro_id,
                    time.time(),
                    json.dumps(list(run_selection)),
                    limits.to_json(),
                    overrides.to_json(),
                ),
            )
        return job_id

    def _check_uploads(self, overrides: RunOverrides) -> None:
        conn = self._db.connect()
        for logical, upload_id in overrides.input_uploads.items():
            row = conn.execute(
                "SELECT upload_id FROM uploads WHERE upload_id = ?", (upload_id,)
            ).fetchone()
            if row is None:
                raise InvalidOverride(
                    f"input {logical!r} references unknown upload {upload_id!r}"
                )

    # -- worker side ------------------------------------------------------

    def claim(self, worker: str) -> str | None:
        """Move the oldest QUEUED job to BUILDING; None when queue is empty."""
        with self._db.tx(immediate=True) as tx:
            row = tx.execute(
                "SELECT job_id FROM jobs WHERE state = 'QUEUED'"
                " ORDER BY created_at, job_id LIMIT 1"
            ).fetchone()
            if row is None:
                return None
            tx.execute(
                "UPDATE jobs SET state = 'BUILDING', worker = ?, started_at = ?"
                " WHERE job_id = ?",
                (worker, time.time(), row["job_id"]),
            )
            return row["job_id"]

    def set_state(self, job_id: str, new_state: str, **fields) -> None:
        """Transition job_id to new_state, enforcing the state machine."""
        if not self._try_set(job_id, new_state, strict=True, **fields):
            raise AssertionError("unreachable")  # strict mode raises instead

    def try_set_state(self, job_id: str, new_state: str, **fields) -> bool:
        """Like set_state, but returns False if the job is already terminal
        (it lost a race against cancel); other illegal moves still raise."""
        return self._try_set(job_id, new_state, strict=False, **fields)

    def _try_set(self, job_id: str, new_state: str, *, strict: bool, **fields) -> bool:
        assignments = {"state": new_state}
        for name in ("termination", "error", "runs_json", "outputs_json", "log_ref"):
            if name in fields and fields[name] is not None:
                assignments[name] = fields[name]
        with self._db.tx(immediate=True) as tx:
            row = tx.execute(
                "SELECT state FROM jobs WHERE job_id = ?", (job_id,)
            ).fetchone()
            if row is None:
                raise UnknownJob(f"no such job {job_id!r}")
            current = row["state"]
            if not strict and is_terminal(current):
                return False
            check_transition(current, new_state)
            if is_terminal(new_state):
                assignments["finished_at"] = time.time()
            sets = ", ".join(f"{k} = ?" for k in assignments)
            tx.execute(
                f"UPDATE jobs SET {sets} WHERE job_id = ?",
                (*assignments.values(), job_id),
            )
        return True

    def update_fields(self, job_id: str, **fields) -> None:
        """Write non-state columns (log_ref, outputs_json) without a transition."""
        allowed = {"log_ref", "outputs_json", "runs_json", "error"}
        unknown = set(fields) - allowed
        assert not unknown, f"refusing to update {unknown}"
        if not fields:
            return
        sets = ", ".join(f"{k} = ?" for k in fields)
        with self._db.tx(immediate=True) as tx:
            tx.execute(
                f"UPDATE jobs SET {sets} WHERE job_id = ?",
                (*fields.values(), job_id),
            )

    # -- cancellation -------------------------------------------------------

    def cancel(self, job_id: str) -> str:
        """Cancel if pre-terminal; always returns the (new) state. Idempotent."""
        with self._db.tx(immediate=True) as tx:
            row = tx.execute(
                "SELECT state FROM jobs WHERE job_id = ?", (job_id,)
            ).fetchone()
            if row is None:
                raise UnknownJob(f"no such job {job_id!r}")
            current = row["state"]
            if is_terminal(current):
                return current
            assert current in _CANCELLABLE
            tx.execute(
                "UPDATE jobs SET state = 'CANCELLED', termination = 'cancelled',"
                " finished_at = ? WHERE job_id = ?",
                (time.time(), job_id),
            )
        with self._cancel_lock:
            kill = self._cancellers.get(job_id)
        if kill is not None:
            kill()
        return "CANCELLED"

    def register_canceller(self, job_id: str, kill: Callable[[], None]) -> None:
        with self._cancel_lock:
            self._cancellers[job_id] = kill

    def clear_canceller(self, job_id: str) -> None:
        with self._cancel_lock:
            self._cancellers.pop(job_id, None)

    # -- introspection ------------------------------------------------------

    def get(self, job_id: str):
        row = self._db.connect().execute(
            "SELECT * FROM jobs WHERE job_id = ?", (job_id,)
        ).fetchone()
        if row is None:
            raise UnknownJob(f"no such job {job_id!r}")
        return row

    def state_of(self, job_id: str) -> str:
        return self.get(job_id)["state"]

    def position(self, job_id: str) -> int | None:
        """0-based place in the QUEUED line; None once the job has left it."""
        row = self.get(job_id)
        if row["state"] != "QUEUED":
            return None
        ahead = self._db.connect().execute(
            "SELECT COUNT(*) AS n FROM jobs WHERE state = 'QUEUED' AND"
            " (created_at < ? OR (created_at = ? AND job_id < ?))",
            (row["created_at"], row["created_at"], job_id),
        ).fetchone()
        return ahead["n"]

    def running_count(self) -> int:
        return self._db.connect().execute(
            "SELECT COUNT(*) AS n FROM jobs WHERE state = 'RUNNING'"
        ).fetchone()["n"]

    def queued_count(self) -> int:
        return self._db.connect().execute(
            "SELECT COUNT(*) AS n FROM jobs WHERE state = 'QUEUED'"
        ).fetchone()["n"]

    def protected_digests(self) -> set[str]:
        """Bundle digests of live jobs — their images must not be evicted."""
        rows = self._db.connect().execute(
            "SELECT DISTINCT r.bundle_digest AS d FROM jobs j"
            " JOIN reproductions r ON r.repro_id = j.repro_id"
            " WHERE j.state IN ('QUEUED', 'BUILDING', 'RUNNING')"
        ).fetchall()
        return {row["d"] for row in rows}

    # -- crash recovery ------------------------------------------------------

    def recover_stranded(self, note: Callable[[str, str], None] | None = None) -> int:
        """Fail jobs stuck in BUILDING/RUNNING from a previous process life."""
        recovered = 0
        with self._db.tx(immediate=True) as tx:
            rows = tx.execute(
                "SELECT job_id, state FROM jobs"
                " WHERE state IN ('BUILDING', 'RUNNING')"
            ).fetchall()
            for row in rows:
                check_transition(row["state"], "FAILED")
                tx.execute(
                    "UPDATE jobs SET state = 'FAILED', finished_at = ?,"
                    " error = 'worker terminated before the job finished'"
                    " WHERE job_id = ?",
                    (time.time(), row["job_id"]),
                )
                recovered += 1
        if note is not None:
            for row in rows:
                note(row["job_id"], "worker terminated before the job finished")
        return recovered
