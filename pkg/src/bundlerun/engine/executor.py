"""Runs one claimed job end to end: build/cache image, execute the selected
runs sequentially in a single sandbox, enforce limits, collect outputs.

The executor owns every terminal-state write except CANCELLED, which the
queue writes on behalf of the cancelling client; races are resolved by
try_set_state (terminal states are absorbing).
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import time
import traceback
from typing import Iterator

from bundlerun.backend import (
    TERM_MEMORY,
    TERM_WALL,
    ContainerBackend,
    Sandbox,
)
from bundlerun.bundle.reader import Bundle, parse_bundle
from bundlerun.db import Database
from bundlerun.engine import ResourceLimits, RunOverrides
from bundlerun.engine.logs import LogDir, LogWriter
from bundlerun.engine.queue import JobQueue
from bundlerun.errors import (
    BundlerunError,
    ImageMissing,
    PathTraversal,
    SandboxFailure,
)
from bundlerun.images.builder import ImageStore
from bundlerun.storage import ObjectStore, ref_from_json, ref_to_json

log = logging.getLogger(__name__)

_COPY_CHUNK = 1024 * 1024


class _ChunkReader:
    """File-like view over an iterator of byte chunks."""

    def __init__(self, chunks: Iterator[bytes]):
        self._chunks = chunks
        self._buf = b""

    def read(self, n: int = -1) -> bytes:
        if n < 0:
            return self._buf + b"".join(self._chunks)
        while len(self._buf) < n:
            chunk = next(self._chunks, b"")
            if not chunk:
                break
            self._buf += chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out


class Executor:
    def __init__(
        self,
        db: Database,
        queue: JobQueue,
        images: ImageStore,
        backend: ContainerBackend,
        store: ObjectStore,
        logs: LogDir,
        *,
        network: bool = False,
        grace_seconds: float = 10.0,
    ):
        self._db = db
        self._queue = queue
        self._images = images
        self._backend = backend
        self._store = store
        self._logs = logs
        self._network = network
        self._grace = grace_seconds

    def execute_job(self, job_id: str) -> str:
        """Drive a claimed (BUILDING) job to a terminal state; returns it."""
        job = self._queue.get(job_id)
        limits = ResourceLimits.from_json(job["limits_json"])
        overrides = RunOverrides.from_json(job["overrides_json"])
        selection = tuple(json.loads(job["selection_json"]))
        writer = self._logs.open_writer(job_id, limits.log_bytes_cap)
        bundle: Bundle | None = None
        try:
            repro = self._db.connect().execute(
                "SELECT * FROM reproductions WHERE repro_id = ?",
                (job["repro_id"],),
            ).fetchone()
            if repro is None:
                raise SandboxFailure(f"job {job_id} references a missing reproduction")
            bundle = self._load_bundle(repro["bundle_ref"])
            return self._execute(job_id, bundle, selection, overrides, limits, writer)
        except BundlerunError as exc:
            writer.line(f"[error] {exc}")
            self._queue.try_set_state(job_id, "FAILED", error=str(exc))
            return self._queue.state_of(job_id)
        except Exception as exc:  # no zombie jobs on unexpected bugs
            writer.line(f"[error] internal failure: {exc}")
            log.error("job %s crashed:\n%s", job_id, traceback.format_exc())
            self._queue.try_set_state(job_id, "FAILED", error=f"internal: {exc}")
            return self._queue.state_of(job_id)
        finally:
            if bundle is not None:
                bundle.close()
            writer.close()
            self._finalize_log(job_id)

    # -- phases ---------------------------------------------------------

    def _execute(
        self,
        job_id: str,
        bundle: Bundle,
        selection: tuple[str, ...],
        overrides: RunOverrides,
        limits: ResourceLimits,
        writer: LogWriter,
    ) -> str:
        for attempt in (1, 2):
            ref, rootfs = self._images.ensure_image(bundle)
            writer.line(f"[build] image {ref.image_digest} ready")
            if self._queue.state_of(job_id) == "CANCELLED":
                return "CANCELLED"
            if not self._queue.try_set_state(job_id, "RUNNING"):
                return self._queue.state_of(job_id)
            try:
                return self._run_all(
                    job_id, bundle, rootfs, selection, overrides, limits, writer
                )
            except ImageMissing as exc:
                if attempt == 2:
                    raise
                writer.line(f"[build] image lost mid-flight ({exc}); rebuilding once")
                if not self._queue.try_set_state(job_id, "BUILDING"):
                    return self._queue.state_of(job_id)
        raise AssertionError("unreachable")

    def _run_all(
        self,
        job_id: str,
        bundle: Bundle,
        rootfs: str,
        selection: tuple[str, ...],
        overrides: RunOverrides,
        limits: ResourceLimits,
        writer: LogWriter,
    ) -> str:
        if not os.path.isdir(rootfs):
            raise ImageMissing(f"cached rootfs {rootfs} disappeared")
        manifest = bundle.manifest
        runs_by_id = {run.run_id: run for run in manifest.runs}
        per_run: list[dict] = []
        job_termination = "completed"
        final_state = "SUCCEEDED"
        with self._backend.create_sandbox(rootfs) as sandbox:
            self._queue.register_canceller(job_id, sandbox.kill_current)
            try:
                self._materialize_inputs(sandbox, manifest, overrides, writer)
                deadline = time.monotonic() + limits.wall_clock_seconds
                for run_id in selection:
                    if self._queue.state_of(job_id) == "CANCELLED":
                        writer.line("[job] cancelled")
                        return "CANCELLED"
                    run = runs_by_id[run_id]
                    replaced = run_id in overrides.argv_replacements
                    argv = tuple(overrides.argv_replacements.get(run_id, run.argv))
                    # a replaced command invalidates the recorded exit code
                    expected_exit = 0 if replaced else run.expected_exit
                    env = dict(manifest.environment)
                    env.update(run.env_overrides)
                    env.update(overrides.env_patches.get(run_id, {}))
                    writer.line(f"[run {run_id}] $ {shlex.join(argv)}")
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        writer.line(f"[run {run_id}] wall clock budget exhausted")
                        job_termination, final_state = "wall_limit", "TIMEOUT"
                        break
                    outcome = sandbox.execute(
                        list(argv),
                        cwd=run.working_dir,
                        env=env,
                        wall_seconds=remaining,
                        memory_bytes=limits.memory_bytes,
                        network=self._network,
                        grace_seconds=self._grace,
                        sink=writer,
                    )
                    per_run.append(
                        {
                            "run_id": run_id,
                            "exit_code": outcome.exit_code,
                            "duration_seconds": round(outcome.duration_seconds, 3),
                        }
                    )
                    writer.line(
                        f"[run {run_id}] exit {outcome.exit_code}"
                        f" after {outcome.duration_seconds:.2f}s"
                    )
                    if self._queue.state_of(job_id) == "CANCELLED":
                        writer.line("[job] cancelled")
                        return "CANCELLED"
                    if outcome.termination == TERM_WALL:
                        writer.line(f"[run {run_id}] wall clock limit reached")
                        job_termination, final_state = "wall_limit", "TIMEOUT"
                        break
                    if outcome.termination == TERM_MEMORY:
                        writer.line(f"[run {run_id}] memory limit reached")
                        job_termination, final_state = "memory_limit", "FAILED"
                        break
                    if outcome.exit_code != expected_exit:
                        final_state = "FAILED"
                        break
                outputs = self._collect_outputs(
                    sandbox, manifest, job_id, limits.output_bytes_cap, writer
                )
            finally:
                self._queue.clear_canceller(job_id)
        error = None
        if final_state == "FAILED" and job_termination == "completed" and per_run:
            error = f"run {per_run[-1]['run_id']} exited {per_run[-1]['exit_code']}"
        self._queue.try_set_state(
            job_id,
            final_state,
            termination=job_termination,
            runs_json=json.dumps(per_run),
            outputs_json=json.dumps(outputs),
            error=error,
        )
        return self._queue.state_of(job_id)

    def _materialize_inputs(
        self, sandbox: Sandbox, manifest, overrides: RunOverrides, writer: LogWriter
    ) -> None:
        if not overrides.input_uploads:
            return
        inputs_by_name = {f.logical_name: f for f in manifest.input_files}
        conn = self._db.connect()
        for logical, upload_id in sorted(overrides.input_uploads.items()):
            row = conn.execute(
                "SELECT ref_json FROM uploads WHERE upload_id = ?", (upload_id,)
            ).fetchone()
            if row is None:
                raise SandboxFailure(f"upload {upload_id!r} vanished before run")
            ref = ref_from_json(row["ref_json"])
            declared = inputs_by_name[logical]
            host = sandbox.host_path(declared.path)
            os.makedirs(os.path.dirname(host), exist_ok=True)
            with open(host, "wb") as out:
                for chunk in self._store.get_artifact(ref):
                    out.write(chunk)
            writer.line(
                f"[input] {logical} replaced with upload ({ref.size_bytes} bytes)"
            )

    def _collect_outputs(
        self,
        sandbox: Sandbox,
        manifest,
        job_id: str,
        output_cap: int,
        writer: LogWriter,
    ) -> list[dict]:
        collected: list[dict] = []
        for declared in manifest.output_files:
            try:
                host = sandbox.host_path(declared.path)
            except PathTraversal:
                writer.line(f"[output] {declared.logical_name}: unsafe path, skipped")
                continue
            if not os.path.isfile(host):
                writer.line(f"[output] {declared.logical_name}: not present, skipped")
                continue
            size = os.path.getsize(host)
            if size > output_cap:
                writer.line(
                    f"[output] {declared.logical_name}: {size} bytes exceeds the"
                    f" {output_cap}-byte cap, skipped"
                )
                continue
            with open(host, "rb") as f:
                ref = self._store.put_artifact(
                    f"outputs/{job_id}", declared.logical_name, f
                )
            collected.append(
                {"logical_name": declared.logical_name, "ref": json.loads(ref_to_json(ref))}
            )
            writer.line(f"[output] {declared.logical_name}: {size} bytes collected")
        return collected

    def _finalize_log(self, job_id: str) -> None:
        path = self._logs.path(job_id)
        try:
            with open(path, "rb") as f:
                ref = self._store.put_artifact("logs", job_id, f)
            self._queue.update_fields(job_id, log_ref=ref_to_json(ref))
        except OSError:
            pass  # no log was ever written

    def _load_bundle(self, ref_json: str) -> Bundle:
        ref = ref_from_json(ref_json)
        return parse_bundle(_ChunkReader(self._store.get_artifact(ref)))
