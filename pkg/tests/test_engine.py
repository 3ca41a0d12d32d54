"""Queue, state machine, logs, executor, and worker pool."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import os
import shutil
import threading
import time
from uuid import uuid4

import pytest

import fixtures
from bundlerun.backend.process import ProcessBackend
from bundlerun.backend.rootfs import copy_rootfs, provision_base_rootfs
from bundlerun.bundle.manifest import IoFile, RunSpec
from bundlerun.bundle.reader import parse_bundle
from bundlerun.db import Database
from bundlerun.engine import ResourceLimits, RunOverrides
from bundlerun.engine.executor import Executor
from bundlerun.engine.logs import TRUNCATION_MARKER, LogDir
from bundlerun.engine.queue import JobQueue
from bundlerun.engine.state import (
    JOB_STATES,
    TERMINAL_STATES,
    check_transition,
    is_terminal,
)
from bundlerun.engine.worker import WorkerPool
from bundlerun.errors import (
    IllegalTransition,
    InvalidOverride,
    LimitsExceedPolicy,
    OffsetOutOfRange,
    SandboxFailure,
    UnknownJob,
)
from bundlerun.images.builder import ImageStore
from bundlerun.images.devregistry import DevRegistry
from bundlerun.images.registry import RegistryClient
from bundlerun.storage import ref_from_json, ref_to_json
from bundlerun.storage.filestore import FileStore

LEGAL = {
    ("QUEUED", "BUILDING"),
    ("BUILDING", "RUNNING"),
    ("BUILDING", "FAILED"),
    ("RUNNING", "SUCCEEDED"),
    ("RUNNING", "FAILED"),
    ("RUNNING", "TIMEOUT"),
    ("RUNNING", "BUILDING"),
    ("QUEUED", "CANCELLED"),
    ("BUILDING", "CANCELLED"),
    ("RUNNING", "CANCELLED"),
}


class TestStateMachine:
    def test_table_is_exhaustive(self):
        for old in JOB_STATES:
            for new in JOB_STATES:
                if (old, new) in LEGAL:
                    check_transition(old, new)
                else:
                    with pytest.raises(IllegalTransition):
                        check_transition(old, new)

    def test_terminals_absorbing(self):
        for terminal in TERMINAL_STATES:
            assert is_terminal(terminal)
            for new in JOB_STATES:
                with pytest.raises(IllegalTransition):
                    check_transition(terminal, new)

    def test_unknown_state_rejected(self):
        with pytest.raises(IllegalTransition):
            check_transition("QUEUED", "EXPLODED")


@pytest.fixture()
def db(tmp_path):
    return Database(str(tmp_path / "state.sqlite"))


@pytest.fixture()
def queue(db):
    return JobQueue(db, max_wall_seconds=3600)


def _register_repro(db, store, raw: bytes) -> tuple[str, str]:
    bundle = parse_bundle(io.BytesIO(raw))
    digest = bundle.content_digest
    bundle.close()
    ref = store.put_bytes("bundles", digest, raw)
    repro_id = uuid4().hex[:10]
    with db.tx() as tx:
        tx.execute(
            "INSERT INTO reproductions (repro_id, canonical_path, source_kind,"
            " source_ref, bundle_digest, bundle_ref, created_at)"
            " VALUES (?, ?, 'upload', 'test', ?, ?, ?)",
            (repro_id, f"/reproduce/u/{repro_id}", digest, ref_to_json(ref), time.time()),
        )
    return repro_id, digest


def _register_upload(db, store, data: bytes, filename: str = "upload.bin") -> str:
    upload_id = uuid4().hex[:8]
    ref = store.put_bytes("uploads", upload_id, data)
    with db.tx() as tx:
        tx.execute(
            "INSERT INTO uploads (upload_id, ref_json, filename, size_bytes,"
            " content_digest, created_at) VALUES (?, ?, ?, ?, ?, ?)",
            (upload_id, ref_to_json(ref), filename, ref.size_bytes, ref.digest,
             time.time()),
        )
    return upload_id


class TestQueue:
    @pytest.fixture()
    def store(self, tmp_path):
        return FileStore(str(tmp_path / "objects"), secret="test")

    @pytest.fixture()
    def repro(self, db, store):
        return _register_repro(db, store, fixtures.pipeline_bundle_bytes())[0]

    def test_submit_defaults_to_all_runs_in_order(self, queue, repro):
        job_id = queue.submit(repro, fixtures.pipeline_manifest())
        row = queue.get(job_id)
        assert row["state"] == "QUEUED"
        assert json.loads(row["selection_json"]) == ["collect", "analyze", "plot"]

    def test_selection_subset_kept_in_given_order(self, queue, repro):
        job_id = queue.submit(
            repro, fixtures.pipeline_manifest(), run_selection=("analyze", "collect")
        )
        assert json.loads(queue.get(job_id)["selection_json"]) == ["analyze", "collect"]

    def test_unknown_run_in_selection(self, queue, repro):
        with pytest.raises(InvalidOverride):
            queue.submit(repro, fixtures.pipeline_manifest(), run_selection=("nope",))

    def test_duplicate_selection_rejected(self, queue, repro):
        with pytest.raises(InvalidOverride):
            queue.submit(
                repro, fixtures.pipeline_manifest(), run_selection=("collect", "collect")
            )

    def test_override_unknown_run_id(self, queue, repro):
        overrides = RunOverrides(argv_replacements={"nope": ("true",)})
        with pytest.raises(InvalidOverride):
            queue.submit(repro, fixtures.pipeline_manifest(), overrides=overrides)

    def test_override_undeclared_input(self, queue, repro):
        overrides = RunOverrides(input_uploads={"ghost.txt": "u1"})
        with pytest.raises(InvalidOverride):
            queue.submit(repro, fixtures.pipeline_manifest(), overrides=overrides)

    def test_override_unknown_upload_id(self, db, store, queue):
        repro, _ = _register_repro(db, store, fixtures.transform_bundle_bytes())
        overrides = RunOverrides(input_uploads={"data.txt": "missing"})
        with pytest.raises(InvalidOverride):
            queue.submit(repro, fixtures.transform_manifest(), overrides=overrides)

    def test_limits_above_policy(self, queue, repro):
        with pytest.raises(LimitsExceedPolicy):
            queue.submit(
                repro,
                fixtures.pipeline_manifest(),
                limits=ResourceLimits(wall_clock_seconds=3601),
            )

    def test_nonpositive_limit(self, queue, repro):
        with pytest.raises(LimitsExceedPolicy):
            queue.submit(
                repro,
                fixtures.pipeline_manifest(),
                limits=ResourceLimits(memory_bytes=0),
            )

    def test_claim_is_fifo(self, queue, repro):
        ids = [queue.submit(repro, fixtures.pipeline_manifest()) for _ in range(3)]
        claimed = [queue.claim("w"), queue.claim("w"), queue.claim("w")]
        assert claimed == ids
        assert queue.claim("w") is None
        row = queue.get(ids[0])
        assert row["state"] == "BUILDING"
        assert row["worker"] == "w"
        assert row["started_at"] is not None

    def test_concurrent_claims_never_double_claim(self, queue, repro):
        ids = {queue.submit(repro, fixtures.pipeline_manifest()) for _ in range(20)}
        claimed: list[str] = []
        lock = threading.Lock()
        barrier = threading.Barrier(8)

        def worker(name):
            barrier.wait()
            while True:
                job = queue.claim(name)
                if job is None:
                    return
                with lock:
                    claimed.append(job)

        threads = [threading.Thread(target=worker, args=(f"w{i}",)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=30)
        assert sorted(claimed) == sorted(ids)
        assert len(set(claimed)) == len(ids)

    def test_illegal_transition_rejected(self, queue, repro):
        job_id = queue.submit(repro, fixtures.pipeline_manifest())
        with pytest.raises(IllegalTransition):
            queue.set_state(job_id, "RUNNING")

    def test_try_set_state_loses_to_terminal(self, queue, repro):
        job_id = queue.submit(repro, fixtures.pipeline_manifest())
        queue.cancel(job_id)
        assert queue.try_set_state(job_id, "BUILDING") is False
        assert queue.state_of(job_id) == "CANCELLED"

    def test_cancel_queued_and_idempotent(self, queue, repro):
        job_id = queue.submit(repro, fixtures.pipeline_manifest())
        assert queue.cancel(job_id) == "CANCELLED"
        assert queue.cancel(job_id) == "CANCELLED"
        assert queue.get(job_id)["termination"] == "cancelled"
        # a cancelled job never gets claimed
        assert queue.claim("w") is None

    def test_cancel_terminal_is_noop(self, queue, repro):
        job_id = queue.submit(repro, fixtures.pipeline_manifest())
        queue.claim("w")
        queue.set_state(job_id, "RUNNING")
        queue.set_state(job_id, "SUCCEEDED", termination="completed")
        assert queue.cancel(job_id) == "SUCCEEDED"

    def test_cancel_unknown_job(self, queue):
        with pytest.raises(UnknownJob):
            queue.cancel("nothere")

    def test_queue_position(self, queue, repro):
        ids = [queue.submit(repro, fixtures.pipeline_manifest()) for _ in range(3)]
        assert [queue.position(j) for j in ids] == [0, 1, 2]
        queue.claim("w")
        assert queue.position(ids[0]) is None
        assert [queue.position(j) for j in ids[1:]] == [0, 1]

    def test_recover_stranded(self, queue, repro):
        a = queue.submit(repro, fixtures.pipeline_manifest())
        b = queue.submit(repro, fixtures.pipeline_manifest())
        c = queue.submit(repro, fixtures.pipeline_manifest())
        queue.claim("w")  # a -> BUILDING
        queue.claim("w")  # b -> BUILDING
        queue.set_state(b, "RUNNING")
        assert queue.recover_stranded() == 2
        assert queue.state_of(a) == "FAILED"
        assert queue.state_of(b) == "FAILED"
        assert queue.state_of(c) == "QUEUED"
        assert "worker terminated" in queue.get(a)["error"]

    def test_protected_digests_cover_live_jobs(self, db, store, queue):
        repro_a, digest_a = _register_repro(db, store, fixtures.hello_bundle_bytes())
        repro_b, digest_b = _register_repro(db, store, fixtures.pipeline_bundle_bytes())
        job_a = queue.submit(repro_a, fixtures.hello_manifest())
        queue.submit(repro_b, fixtures.pipeline_manifest())
        assert queue.protected_digests() == {digest_a, digest_b}
        queue.claim("w")
        queue.set_state(job_a, "RUNNING")
        queue.set_state(job_a, "SUCCEEDED", termination="completed")
        assert queue.protected_digests() == {digest_b}


class TestLogs:
    def test_cap_and_truncation_marker(self, tmp_path):
        logs = LogDir(str(tmp_path))
        writer = logs.open_writer("job1", cap=100)
        writer.write(b"x" * 80)
        writer.write(b"y" * 80)
        writer.write(b"z" * 80)  # dropped entirely
        writer.close()
        data = open(logs.path("job1"), "rb").read()
        assert data == b"x" * 80 + b"y" * 20 + TRUNCATION_MARKER
        assert writer.truncated

    def test_read_offsets(self, tmp_path):
        logs = LogDir(str(tmp_path))
        writer = logs.open_writer("job2", cap=1000)
        writer.write(b"hello world")
        writer.close()
        chunk, nxt, eof = logs.read("job2", 0, is_live=lambda: False)
        assert chunk == b"hello world" and nxt == 11 and not eof
        chunk, nxt, eof = logs.read("job2", 11, is_live=lambda: False)
        assert chunk == b"" and nxt == 11 and eof
        chunk, nxt, eof = logs.read("job2", 6, is_live=lambda: False)
        assert chunk == b"world"

    def test_offset_out_of_range(self, tmp_path):
        logs = LogDir(str(tmp_path))
        writer = logs.open_writer("job3", cap=1000)
        writer.write(b"abc")
        writer.close()
        with pytest.raises(OffsetOutOfRange):
            logs.read("job3", 4, is_live=lambda: False)
        with pytest.raises(OffsetOutOfRange):
            logs.read("job3", -1, is_live=lambda: False)

    def test_concurrent_readers_identical(self, tmp_path):
        logs = LogDir(str(tmp_path))
        writer = logs.open_writer("job4", cap=10_000)
        stop = threading.Event()

        def produce():
            for i in range(50):
                writer.write(f"line {i}\n".encode())
                time.sleep(0.002)
            stop.set()

        def consume(out: list):
            offset = 0
            while True:
                chunk, offset, eof = logs.read(
                    "job4", offset, is_live=lambda: not stop.is_set(), wait_seconds=1.0
                )
                out.append(chunk)
                if eof:
                    return

        producer = threading.Thread(target=produce)
        results: list[list[bytes]] = [[], []]
        readers = [threading.Thread(target=consume, args=(r,)) for r in results]
        producer.start()
        for r in readers:
            r.start()
        producer.join(timeout=10)
        for r in readers:
            r.join(timeout=10)
        expected = b"".join(f"line {i}\n".encode() for i in range(50))
        assert b"".join(results[0]) == expected
        assert b"".join(results[1]) == expected

    def test_long_poll_wakes_on_new_data(self, tmp_path):
        logs = LogDir(str(tmp_path))
        writer = logs.open_writer("job5", cap=1000)
        writer.write(b"first")

        def late_append():
            time.sleep(0.3)
            writer.write(b" second")

        threading.Thread(target=late_append).start()
        chunk, nxt, eof = logs.read(
            "job5", 5, is_live=lambda: True, wait_seconds=5.0
        )
        assert chunk == b" second" and not eof

    def test_empty_poll_times_out_for_live_job(self, tmp_path):
        logs = LogDir(str(tmp_path))
        logs.open_writer("job6", cap=10).close()
        started = time.monotonic()
        chunk, _, eof = logs.read("job6", 0, is_live=lambda: True, wait_seconds=0.3)
        assert chunk == b"" and not eof
        assert time.monotonic() - started >= 0.25


# ---------------------------------------------------------------------------
# Integration: full executor stack on the process backend (root only).

needs_root = pytest.mark.skipif(os.geteuid() != 0, reason="requires root")

MEMORY_HOG = 's=aaaaaaaaaaaaaaaa; while true; do s="$s$s"; done'


@pytest.fixture(scope="module")
def shared_base(tmp_path_factory):
    path = tmp_path_factory.mktemp("base") / "rootfs"
    provision_base_rootfs(str(path))
    return str(path)


@pytest.fixture(scope="module")
def backend(tmp_path_factory):
    if os.geteuid() != 0:
        pytest.skip("requires root")
    return ProcessBackend(str(tmp_path_factory.mktemp("scratch")))


@pytest.fixture(scope="module")
def registry():
    with DevRegistry() as reg:
        yield reg


class Harness:
    def __init__(self, tmp_path, backend, registry, shared_base):
        self.db = Database(str(tmp_path / "svc.sqlite"))
        self.store = FileStore(str(tmp_path / "objects"), secret="test")
        self.queue = JobQueue(self.db, max_wall_seconds=3600)
        self.images = ImageStore(
            self.db,
            RegistryClient(registry.endpoint),
            str(tmp_path / "cache"),
            protected_digests=self.queue.protected_digests,
            provisioner=lambda dest: copy_rootfs(shared_base, dest),
        )
        self.logs = LogDir(str(tmp_path / "logs"))
        self.executor = Executor(
            self.db,
            self.queue,
            self.images,
            backend,
            self.store,
            self.logs,
            grace_seconds=2.0,
        )

    def submit(self, raw: bytes, manifest, **kw) -> str:
        repro_id, _ = _register_repro(self.db, self.store, raw)
        return self.queue.submit(repro_id, manifest, **kw)

    def run_to_end(self, job_id: str) -> str:
        claimed = self.queue.claim("t")
        assert claimed == job_id
        return self.executor.execute_job(job_id)

    def log_text(self, job_id: str) -> str:
        with open(self.logs.path(job_id), "rb") as f:
            return f.read().decode(errors="replace")

    def outputs(self, job_id: str) -> dict[str, bytes]:
        row = self.queue.get(job_id)
        out = {}
        for entry in json.loads(row["outputs_json"]):
            ref = ref_from_json(json.dumps(entry["ref"]))
            out[entry["logical_name"]] = self.store.get_bytes(ref)
        return out


@pytest.fixture()
def harness(tmp_path, backend, registry, shared_base):
    return Harness(tmp_path, backend, registry, shared_base)


def _custom_bundle(argv_script: str, *, expected_exit: int = 0, run_id: str = "main",
                   outputs=(("out.txt", "/out/out.txt"),)) -> tuple[bytes, object]:
    manifest = dataclasses.replace(
        fixtures.hello_manifest(),
        runs=(
            RunSpec(
                run_id=run_id,
                argv=("sh", "-c", argv_script),
                working_dir="/",
                expected_exit=expected_exit,
            ),
        ),
        output_files=tuple(
            IoFile(logical_name=name, path=path, role="output")
            for name, path in outputs
        ),
    )
    raw = fixtures.pack_fixture_bundle(manifest, fixtures.hello_files())
    return raw, manifest


@needs_root
class TestExecutor:
    def test_hello_end_to_end(self, harness):
        job_id = harness.submit(fixtures.hello_bundle_bytes(), fixtures.hello_manifest())
        assert harness.run_to_end(job_id) == "SUCCEEDED"
        row = harness.queue.get(job_id)
        assert row["termination"] == "completed"
        runs = json.loads(row["runs_json"])
        assert [r["run_id"] for r in runs] == ["main"]
        assert runs[0]["exit_code"] == 0
        assert row["started_at"] <= row["finished_at"]
        outputs = harness.outputs(job_id)
        assert outputs == {"out.txt": b"hello\n"}
        log = harness.log_text(job_id)
        assert "[build] image sha256:" in log
        assert "[run main] $ sh -c 'echo hello > /out/out.txt'" in log
        assert "[output] out.txt: 6 bytes collected" in log
        assert row["log_ref"] is not None

    def test_pipeline_matches_host_oracle(self, harness):
        oracle = fixtures.host_oracle(
            fixtures.pipeline_manifest(),
            fixtures.pipeline_files(),
            collect=["report.txt", "sum.txt"],
        )
        job_id = harness.submit(
            fixtures.pipeline_bundle_bytes(), fixtures.pipeline_manifest()
        )
        assert harness.run_to_end(job_id) == "SUCCEEDED"
        assert harness.outputs(job_id) == oracle

    def test_output_digest_fidelity(self, harness):
        job_id = harness.submit(
            fixtures.pipeline_bundle_bytes(), fixtures.pipeline_manifest()
        )
        harness.run_to_end(job_id)
        row = harness.queue.get(job_id)
        for entry in json.loads(row["outputs_json"]):
            ref = ref_from_json(json.dumps(entry["ref"]))
            data = harness.store.get_bytes(ref)
            assert hashlib.sha256(data).hexdigest() == ref.digest
            assert len(data) == ref.size_bytes

    def test_failing_run_propagates_exit(self, harness):
        raw, manifest = _custom_bundle("false")
        job_id = harness.submit(raw, manifest)
        assert harness.run_to_end(job_id) == "FAILED"
        row = harness.queue.get(job_id)
        assert row["termination"] == "completed"
        assert "exited 1" in row["error"]
        assert harness.outputs(job_id) == {}  # declared output never produced
        assert "not present, skipped" in harness.log_text(job_id)

    def test_partial_outputs_still_collected_on_failure(self, harness):
        raw, manifest = _custom_bundle("echo partial > /out/out.txt; exit 9")
        job_id = harness.submit(raw, manifest)
        assert harness.run_to_end(job_id) == "FAILED"
        assert harness.outputs(job_id) == {"out.txt": b"partial\n"}

    def test_recorded_nonzero_exit_is_success(self, harness):
        raw, manifest = _custom_bundle(
            "echo done > /out/out.txt; exit 3", expected_exit=3
        )
        job_id = harness.submit(raw, manifest)
        assert harness.run_to_end(job_id) == "SUCCEEDED"

    def test_selection_runs_subset_only(self, harness):
        job_id = harness.submit(
            fixtures.pipeline_bundle_bytes(),
            fixtures.pipeline_manifest(),
            run_selection=("collect", "analyze"),
        )
        assert harness.run_to_end(job_id) == "SUCCEEDED"
        outputs = harness.outputs(job_id)
        assert outputs["sum.txt"] == b"55\n"
        assert "report.txt" not in outputs  # plot never ran
        runs = json.loads(harness.queue.get(job_id)["runs_json"])
        assert [r["run_id"] for r in runs] == ["collect", "analyze"]

    def test_argv_override_fidelity(self, harness):
        script = "seq 5 9 | awk '{ s += $1 } END { print s*2 }' > /out/out.txt"
        oracle_manifest = _custom_bundle(script)[1]
        oracle = fixtures.host_oracle(
            oracle_manifest, fixtures.hello_files(), collect=["out.txt"]
        )
        job_id = harness.submit(
            fixtures.hello_bundle_bytes(),
            fixtures.hello_manifest(),
            overrides=RunOverrides(argv_replacements={"main": ("sh", "-c", script)}),
        )
        assert harness.run_to_end(job_id) == "SUCCEEDED"
        assert harness.outputs(job_id) == oracle
        assert harness.outputs(job_id)["out.txt"] == b"70\n"

    def test_env_patch_override(self, harness):
        raw, manifest = _custom_bundle('printf "%s" "$GREETING" > /out/out.txt')
        job_id = harness.submit(
            raw,
            manifest,
            overrides=RunOverrides(env_patches={"main": {"GREETING": "patched"}}),
        )
        assert harness.run_to_end(job_id) == "SUCCEEDED"
        assert harness.outputs(job_id) == {"out.txt": b"patched"}

    def test_manifest_environment_reaches_runs(self, harness):
        raw, manifest = _custom_bundle('printf "%s" "$GREETING" > /out/out.txt')
        job_id = harness.submit(raw, manifest)
        assert harness.run_to_end(job_id) == "SUCCEEDED"
        assert harness.outputs(job_id) == {"out.txt": b"hello"}

    def test_input_upload_override(self, harness):
        replacement = b"fresh input bytes\n"
        upload_id = _register_upload(harness.db, harness.store, replacement)
        job_id = harness.submit(
            fixtures.transform_bundle_bytes(),
            fixtures.transform_manifest(),
            overrides=RunOverrides(input_uploads={"data.txt": upload_id}),
        )
        assert harness.run_to_end(job_id) == "SUCCEEDED"
        assert harness.outputs(job_id) == {"result.txt": b"FRESH INPUT BYTES\n"}
        assert "replaced with upload" in harness.log_text(job_id)

    def test_wall_limit_times_out(self, harness):
        raw, manifest = _custom_bundle("sleep 3600")
        job_id = harness.submit(
            raw, manifest, limits=ResourceLimits(wall_clock_seconds=2)
        )
        started = time.monotonic()
        assert harness.run_to_end(job_id) == "TIMEOUT"
        elapsed = time.monotonic() - started
        assert elapsed < 15
        row = harness.queue.get(job_id)
        assert row["termination"] == "wall_limit"

    def test_memory_limit_kills_run_not_worker(self, harness):
        raw, manifest = _custom_bundle(MEMORY_HOG)
        job_id = harness.submit(
            raw, manifest, limits=ResourceLimits(memory_bytes=64 * 1024 * 1024)
        )
        assert harness.run_to_end(job_id) == "FAILED"
        assert harness.queue.get(job_id)["termination"] == "memory_limit"
        # the executor is fine afterwards
        ok_job = harness.submit(
            fixtures.hello_bundle_bytes(), fixtures.hello_manifest()
        )
        assert harness.run_to_end(ok_job) == "SUCCEEDED"

    def test_cancel_running_job(self, harness):
        raw, manifest = _custom_bundle("sleep 300")
        job_id = harness.submit(raw, manifest)
        result: list[str] = []

        def drive():
            harness.queue.claim("t")
            result.append(harness.executor.execute_job(job_id))

        t = threading.Thread(target=drive)
        t.start()
        deadline = time.monotonic() + 30
        while harness.queue.state_of(job_id) != "RUNNING":
            assert time.monotonic() < deadline
            time.sleep(0.05)
        time.sleep(0.3)  # let the sleep process actually start
        assert harness.queue.cancel(job_id) == "CANCELLED"
        t.join(timeout=20)
        assert not t.is_alive()
        assert result == ["CANCELLED"]
        assert harness.queue.get(job_id)["termination"] == "cancelled"

    def test_image_lost_mid_flight_rebuilds_once(self, harness, monkeypatch):
        raw = fixtures.hello_bundle_bytes()
        job_id = harness.submit(raw, fixtures.hello_manifest())
        real = harness.executor._run_all
        calls = {"n": 0}

        def sabotaged(job, bundle, rootfs, *args, **kw):
            calls["n"] += 1
            if calls["n"] == 1:
                shutil.rmtree(rootfs)  # simulate cache eviction mid-flight
            return real(job, bundle, rootfs, *args, **kw)

        monkeypatch.setattr(harness.executor, "_run_all", sabotaged)
        assert harness.run_to_end(job_id) == "SUCCEEDED"
        assert calls["n"] == 2
        assert "lost mid-flight" in harness.log_text(job_id)
        assert harness.outputs(job_id) == {"out.txt": b"hello\n"}

    def test_sandbox_failure_fails_with_diagnostic(self, harness):
        class BrokenBackend:
            def create_sandbox(self, rootfs):
                raise SandboxFailure("backend exploded")

        broken = Executor(
            harness.db,
            harness.queue,
            harness.images,
            BrokenBackend(),
            harness.store,
            harness.logs,
            grace_seconds=2.0,
        )
        job_id = harness.submit(fixtures.hello_bundle_bytes(), fixtures.hello_manifest())
        harness.queue.claim("t")
        assert broken.execute_job(job_id) == "FAILED"
        assert "backend exploded" in harness.queue.get(job_id)["error"]
        assert "[error] backend exploded" in harness.log_text(job_id)

    def test_concurrent_jobs_isolated(self, harness):
        raw = fixtures.hello_bundle_bytes()
        slow = RunOverrides(
            argv_replacements={
                "main": ("sh", "-c", "echo A > /out/s.txt; sleep 2; cp /out/s.txt /out/out.txt")
            }
        )
        probe = RunOverrides(
            argv_replacements={
                "main": (
                    "sh",
                    "-c",
                    "if [ -e /out/s.txt ]; then echo dirty; else echo clean; fi > /out/out.txt",
                )
            }
        )
        job_a = harness.submit(raw, fixtures.hello_manifest(), overrides=slow)
        job_b = harness.submit(raw, fixtures.hello_manifest(), overrides=probe)
        with WorkerPool(harness.queue, harness.executor, size=2, poll_interval=0.05):
            deadline = time.monotonic() + 60
            while not all(
                is_terminal(harness.queue.state_of(j)) for j in (job_a, job_b)
            ):
                assert time.monotonic() < deadline
                time.sleep(0.1)
        assert harness.queue.state_of(job_a) == "SUCCEEDED"
        assert harness.queue.state_of(job_b) == "SUCCEEDED"
        assert harness.outputs(job_a) == {"out.txt": b"A\n"}
        assert harness.outputs(job_b) == {"out.txt": b"clean\n"}


@needs_root
class TestWorkerPool:
    def test_pool_bound_and_drain(self, harness):
        raw = fixtures.hello_bundle_bytes()
        slow = RunOverrides(
            argv_replacements={"main": ("sh", "-c", "sleep 1; echo hi > /out/out.txt")}
        )
        jobs = [
            harness.submit(raw, fixtures.hello_manifest(), overrides=slow)
            for _ in range(4)
        ]
        max_running = 0
        with WorkerPool(harness.queue, harness.executor, size=2, poll_interval=0.05):
            deadline = time.monotonic() + 120
            while not all(is_terminal(harness.queue.state_of(j)) for j in jobs):
                max_running = max(max_running, harness.queue.running_count())
                assert time.monotonic() < deadline
                time.sleep(0.05)
        assert max_running <= 2
        assert {harness.queue.state_of(j) for j in jobs} == {"SUCCEEDED"}
        # one image build served all four jobs
        assert harness.images.builds_started == 1

    def test_startup_recovery_marks_stranded_failed(self, harness):
        raw = fixtures.hello_bundle_bytes()
        job_id = harness.submit(raw, fixtures.hello_manifest())
        harness.queue.claim("dead-worker")
        pool = WorkerPool(harness.queue, harness.executor, size=1, poll_interval=0.05)
        pool.start()
        pool.stop()
        assert harness.queue.state_of(job_id) == "FAILED"
