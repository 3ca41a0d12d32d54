import os
import shutil
import subprocess
import threading
import time

import pytest

from bundlerun.backend import TERM_COMPLETED, TERM_MEMORY, TERM_WALL
from bundlerun.backend.process import ProcessBackend
from bundlerun.backend.rootfs import provision_base_rootfs
from bundlerun.errors import PathTraversal, SandboxFailure
from fixtures import (
    PIPELINE_ANALYZE,
    PIPELINE_COLLECT,
    PIPELINE_PLOT,
    host_oracle,
    pipeline_files,
    pipeline_manifest,
)

pytestmark = pytest.mark.skipif(
    os.geteuid() != 0, reason="sandbox execution needs root"
)

MEMORY_HOG = 's=aaaaaaaaaaaaaaaa; while true; do s="$s$s"; done'


class ByteSink:
    def __init__(self):
        self.buf = bytearray()
        self._lock = threading.Lock()

    def write(self, chunk: bytes) -> None:
        with self._lock:
            self.buf.extend(chunk)

    def text(self) -> str:
        with self._lock:
            return self.buf.decode(errors="replace")


@pytest.fixture(scope="module")
def base_image(tmp_path_factory):
    root = tmp_path_factory.mktemp("img")
    provision_base_rootfs(str(root))
    for d in ("work", "out", "in"):
        (root / d).mkdir()
    return str(root)


@pytest.fixture(scope="module")
def backend(tmp_path_factory):
    return ProcessBackend(str(tmp_path_factory.mktemp("scratch")))


@pytest.fixture
def sandbox(backend, base_image):
    box = backend.create_sandbox(base_image)
    yield box
    box.close()


class TestProvision:
    def test_shell_and_library_closure_present(self, base_image):
        sh = os.path.join(base_image, "usr/bin/sh")
        assert os.path.isfile(sh) and os.access(sh, os.X_OK)
        # the image must carry the exact libraries the host binary references
        ldd = subprocess.run(["ldd", shutil.which("dash")], capture_output=True, text=True)
        for line in ldd.stdout.splitlines():
            if "=>" in line:
                ref = line.split("=>")[1].split()[0]
                assert os.path.isfile(os.path.join(base_image, ref.lstrip("/"))), ref

    def test_dev_null_is_a_device(self, base_image):
        st = os.stat(os.path.join(base_image, "dev/null"))
        import stat as stat_mod

        assert stat_mod.S_ISCHR(st.st_mode)
        assert os.major(st.st_rdev) == 1 and os.minor(st.st_rdev) == 3

    def test_bin_symlink_and_etc(self, base_image):
        assert os.readlink(os.path.join(base_image, "bin")) == "usr/bin"
        with open(os.path.join(base_image, "etc/passwd")) as f:
            assert f.read().startswith("root:x:0:0:")


class TestExecute:
    def test_echo_writes_into_sandbox(self, sandbox):
        outcome = sandbox.execute(["sh", "-c", "echo hello > /out/x.txt"])
        assert outcome.exit_code == 0
        assert outcome.termination == TERM_COMPLETED
        with open(sandbox.host_path("/out/x.txt"), "rb") as f:
            assert f.read() == b"hello\n"

    def test_exit_code_propagates(self, sandbox):
        assert sandbox.execute(["sh", "-c", "exit 7"]).exit_code == 7

    def test_missing_command_is_127(self, sandbox):
        assert sandbox.execute(["no-such-program-xyz"]).exit_code == 127

    def test_env_reaches_the_command(self, sandbox):
        sink = ByteSink()
        outcome = sandbox.execute(
            ["sh", "-c", 'printf "%s|%s" "$GREETING" "$HOME"'],
            env={"GREETING": "hi there"},
            sink=sink,
        )
        assert outcome.exit_code == 0
        assert sink.text() == "hi there|/root"

    def test_stdout_and_stderr_share_the_sink(self, sandbox):
        sink = ByteSink()
        sandbox.execute(
            ["sh", "-c", "echo to-stdout; echo to-stderr >&2"], sink=sink
        )
        assert "to-stdout" in sink.text()
        assert "to-stderr" in sink.text()

    def test_working_dir_applies(self, sandbox):
        sink = ByteSink()
        sandbox.execute(["sh", "-c", "pwd"], cwd="/work", sink=sink)
        assert sink.text().strip() == "/work"

    def test_image_files_visible_and_writes_stay_out_of_image(
        self, backend, base_image
    ):
        seed = os.path.join(base_image, "in", "seed.txt")
        with open(seed, "w") as f:
            f.write("from the image\n")
        try:
            with backend.create_sandbox(base_image) as box:
                sink = ByteSink()
                box.execute(["sh", "-c", "cat /in/seed.txt"], sink=sink)
                assert sink.text() == "from the image\n"
                box.execute(["sh", "-c", "echo scribble > /in/extra.txt"])
                assert os.path.exists(box.host_path("/in/extra.txt"))
            assert not os.path.exists(os.path.join(base_image, "in", "extra.txt"))
        finally:
            os.unlink(seed)

    def test_deleted_file_disappears_from_merged_view(self, sandbox):
        sandbox.execute(["sh", "-c", "echo gone > /out/t.txt; rm /out/t.txt"])
        assert not os.path.exists(sandbox.host_path("/out/t.txt"))

    def test_empty_argv_rejected(self, sandbox):
        with pytest.raises(SandboxFailure):
            sandbox.execute([])


class TestPipelineAgainstHostOracle:
    def test_three_stage_state_persists(self, sandbox):
        manifest = pipeline_manifest()
        expected = host_oracle(
            manifest, pipeline_files(), collect=["report.txt", "sum.txt"]
        )
        for run in manifest.runs:
            outcome = sandbox.execute(
                list(run.argv), cwd=run.working_dir, env=dict(manifest.environment)
            )
            assert outcome.exit_code == run.expected_exit, run.run_id
        with open(sandbox.host_path("/out/report.txt"), "rb") as f:
            assert f.read() == expected["report.txt"]
        with open(sandbox.host_path("/work/sum.txt"), "rb") as f:
            assert f.read() == expected["sum.txt"]

    def test_commands_match_recorded_text(self):
        manifest = pipeline_manifest()
        scripts = [run.argv[2] for run in manifest.runs]
        assert scripts == [PIPELINE_COLLECT, PIPELINE_ANALYZE, PIPELINE_PLOT]


class TestLimits:
    def test_wall_clock_kill(self, sandbox):
        started = time.monotonic()
        outcome = sandbox.execute(
            ["sh", "-c", "sleep 3600"], wall_seconds=1.5, grace_seconds=0.3
        )
        assert outcome.termination == TERM_WALL
        assert outcome.exit_code in (137, 143)
        assert time.monotonic() - started < 15

    def test_memory_kill(self, sandbox):
        outcome = sandbox.execute(
            ["sh", "-c", MEMORY_HOG],
            memory_bytes=64 * 1024 * 1024,
            wall_seconds=60,
        )
        assert outcome.termination == TERM_MEMORY
        assert outcome.exit_code == 137

    def test_sandbox_survives_a_kill_and_runs_again(self, sandbox):
        sandbox.execute(
            ["sh", "-c", MEMORY_HOG], memory_bytes=64 * 1024 * 1024, wall_seconds=60
        )
        outcome = sandbox.execute(["sh", "-c", "echo alive > /out/alive.txt"])
        assert outcome.exit_code == 0
        with open(sandbox.host_path("/out/alive.txt"), "rb") as f:
            assert f.read() == b"alive\n"

    def test_background_children_do_not_outlive_the_run(self, sandbox):
        marker = "sleep 3877"
        outcome = sandbox.execute(["sh", "-c", f"({marker} &); echo spawned"])
        assert outcome.exit_code == 0
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            if not _host_has_process(marker):
                break
            time.sleep(0.1)
        assert not _host_has_process(marker)

    def test_kill_current_interrupts_a_run(self, sandbox):
        result = {}

        def runner():
            result["outcome"] = sandbox.execute(
                ["sh", "-c", "sleep 300"], wall_seconds=600
            )

        t = threading.Thread(target=runner)
        t.start()
        time.sleep(1.0)
        sandbox.kill_current()
        t.join(timeout=20)
        assert not t.is_alive()
        assert result["outcome"].exit_code in (137, 143)


class TestNetworkIsolation:
    def test_only_loopback_by_default(self, sandbox):
        sink = ByteSink()
        outcome = sandbox.execute(["sh", "-c", "cat /proc/net/dev"], sink=sink)
        assert outcome.exit_code == 0
        names = _interface_names(sink.text())
        assert names == {"lo"}

    def test_network_flag_exposes_host_interfaces(self, sandbox):
        with open("/proc/net/dev") as f:
            host_names = _interface_names(f.read())
        sink = ByteSink()
        sandbox.execute(["sh", "-c", "cat /proc/net/dev"], network=True, sink=sink)
        assert _interface_names(sink.text()) == host_names


class TestContainment:
    """Symlinks must resolve like the kernel would inside the chroot:
    absolute targets re-root at the sandbox, never at the host."""

    def test_absolute_symlink_resolves_to_sandbox_file(self, sandbox):
        sandbox.execute(["sh", "-c", "ln -s /etc/passwd /out/evil"])
        path = sandbox.host_path("/out/evil")
        assert path.startswith(sandbox.root + os.sep)
        with open(path) as f:
            content = f.read()
        # the single-user sandbox passwd, not the host's
        assert content == "root:x:0:0:root:/root:/bin/sh\n"
        with open("/etc/passwd") as f:
            assert f.read() != content

    def test_dotdot_clamps_at_sandbox_root(self, sandbox):
        sandbox.execute(["sh", "-c", "ln -s ../../../../../../etc /out/updirs"])
        path = sandbox.host_path("/out/updirs/passwd")
        assert path == os.path.join(sandbox.root, "etc", "passwd")

    def test_internal_symlink_reads_through(self, sandbox):
        sandbox.execute(
            ["sh", "-c", "echo real > /work/a.txt && ln -s /work/a.txt /out/b"]
        )
        with open(sandbox.host_path("/out/b"), "rb") as f:
            assert f.read() == b"real\n"

    def test_symlink_loop_is_refused(self, sandbox):
        sandbox.execute(["sh", "-c", "ln -s /out/loop2 /out/loop1; ln -s /out/loop1 /out/loop2"])
        with pytest.raises(PathTraversal):
            sandbox.host_path("/out/loop1")

    def test_relative_path_is_refused(self, sandbox):
        with pytest.raises(PathTraversal):
            sandbox.host_path("out/x.txt")


class TestCopyFallback:
    def test_round_trip_without_overlay(self, base_image, tmp_path):
        backend = ProcessBackend(str(tmp_path / "scratch"), use_overlay=False)
        with backend.create_sandbox(base_image) as box:
            outcome = box.execute(["sh", "-c", "echo copied > /out/c.txt"])
            assert outcome.exit_code == 0
            with open(box.host_path("/out/c.txt"), "rb") as f:
                assert f.read() == b"copied\n"
        assert not os.path.exists(os.path.join(base_image, "out", "c.txt"))


class TestCleanup:
    def test_close_releases_scratch_and_mount(self, backend, base_image):
        box = backend.create_sandbox(base_image)
        box.execute(["sh", "-c", "echo x > /out/y.txt"])
        scratch = box._scratch
        box.close()
        assert not os.path.exists(scratch)
        box.close()  # idempotent

    def test_execute_after_close_fails(self, backend, base_image):
        box = backend.create_sandbox(base_image)
        box.close()
        with pytest.raises(SandboxFailure):
            box.execute(["sh", "-c", "true"])


def _host_has_process(marker: str) -> bool:
    for pid in os.listdir("/proc"):
        if not pid.isdigit():
            continue
        try:
            with open(f"/proc/{pid}/cmdline", "rb") as f:
                if marker.encode() in f.read().replace(b"\0", b" "):
                    return True
        except OSError:
            continue
    return False


def _interface_names(proc_net_dev: str) -> set[str]:
    names = set()
    for line in proc_net_dev.splitlines():
        if ":" in line:
            name = line.split(":")[0].strip()
            if name and " " not in name:
                names.add(name)
    return names
