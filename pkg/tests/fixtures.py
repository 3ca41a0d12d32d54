"""Shared fixture bundles used across the suite.

The "hello" bundle is the minimal single-run experiment. The "pipeline"
bundle mirrors a three-stage collect/analyze/plot experiment: stage 1
writes raw data, stage 2 transforms it, stage 3 derives the final output.
Expected outputs for both come from running the same commands directly on
the host (see oracle helpers), never from the code under test.
"""

from __future__ import annotations

import re
import subprocess
import tempfile
from pathlib import Path

from bundlerun.bundle import (
    BundleManifest,
    Dir,
    File,
    IoFile,
    OsInfo,
    RunSpec,
    pack_fixture_bundle,
)

HOST_OS = OsInfo(distribution="ubuntu", distro_version="22.04", architecture="x86_64")


def hello_manifest() -> BundleManifest:
    return BundleManifest(
        format_version="1.0.0",
        runs=(
            RunSpec(
                run_id="main",
                argv=("sh", "-c", "echo hello > /out/out.txt"),
                working_dir="/",
            ),
        ),
        input_files=(),
        output_files=(IoFile(logical_name="out.txt", path="/out/out.txt", role="output"),),
        environment={"GREETING": "hello"},
        os_info=HOST_OS,
    )


def hello_files() -> dict:
    return {"/out": Dir()}


def hello_bundle_bytes() -> bytes:
    data = pack_fixture_bundle(hello_manifest(), hello_files())
    assert data is not None
    return data


PIPELINE_COLLECT = "seq 1 10 > /work/raw.txt"
PIPELINE_ANALYZE = "awk '{ total += $1 } END { print total }' /work/raw.txt > /work/sum.txt"
PIPELINE_PLOT = 'printf "total=%s\\n" "$(cat /work/sum.txt)" > /out/report.txt'


def pipeline_manifest() -> BundleManifest:
    return BundleManifest(
        format_version="1.0.0",
        runs=(
            RunSpec(run_id="collect", argv=("sh", "-c", PIPELINE_COLLECT), working_dir="/work"),
            RunSpec(run_id="analyze", argv=("sh", "-c", PIPELINE_ANALYZE), working_dir="/work"),
            RunSpec(run_id="plot", argv=("sh", "-c", PIPELINE_PLOT), working_dir="/work"),
        ),
        input_files=(),
        output_files=(
            IoFile(logical_name="report.txt", path="/out/report.txt", role="output"),
            IoFile(logical_name="sum.txt", path="/work/sum.txt", role="output"),
        ),
        environment={},
        os_info=HOST_OS,
    )


def pipeline_files() -> dict:
    return {"/work": Dir(), "/out": Dir()}


def pipeline_bundle_bytes() -> bytes:
    data = pack_fixture_bundle(pipeline_manifest(), pipeline_files())
    assert data is not None
    return data


def transform_manifest() -> BundleManifest:
    """Single run that derives its output from a declared input file."""
    return BundleManifest(
        format_version="1.0.0",
        runs=(
            RunSpec(
                run_id="transform",
                argv=("sh", "-c", "tr a-z A-Z < /in/data.txt > /out/result.txt"),
                working_dir="/",
            ),
        ),
        input_files=(IoFile(logical_name="data.txt", path="/in/data.txt", role="input"),),
        output_files=(IoFile(logical_name="result.txt", path="/out/result.txt", role="output"),),
        environment={},
        os_info=HOST_OS,
    )


def transform_files(input_bytes: bytes = b"lower case text\n") -> dict:
    return {"/in/data.txt": File(data=input_bytes), "/out": Dir()}


def transform_bundle_bytes(input_bytes: bytes = b"lower case text\n") -> bytes:
    data = pack_fixture_bundle(transform_manifest(), transform_files(input_bytes))
    assert data is not None
    return data


def host_oracle(manifest: BundleManifest, files: dict, *, collect: list[str]) -> dict[str, bytes]:
    """Execute a manifest's runs directly on the host inside a scratch root.

    Fixture commands address their tree under /work, /out, /in; those
    prefixes are textually rebased onto a temp directory so the commands
    run unchanged on the host, independent of the code under test.
    Returns {logical_name: bytes} for the `collect`ed output names.
    """
    out: dict[str, bytes] = {}
    with tempfile.TemporaryDirectory() as scratch:
        root = Path(scratch)
        _materialize(root, files)
        for run in manifest.runs:
            argv = list(run.argv)
            assert argv[:2] == ["sh", "-c"], "oracle only handles sh -c fixtures"
            script = _rebase(argv[2], root)
            cwd = str(root / run.working_dir.lstrip("/"))
            proc = subprocess.run(
                ["sh", "-c", script], cwd=cwd, capture_output=True, timeout=60
            )
            assert proc.returncode == run.expected_exit, proc.stderr.decode()
        by_name = {f.logical_name: f.path for f in manifest.output_files}
        for name in collect:
            path = root / by_name[name].lstrip("/")
            out[name] = path.read_bytes()
    return out


def _materialize(root: Path, files: dict) -> None:
    for path, entry in sorted(files.items()):
        dest = root / path.lstrip("/")
        if isinstance(entry, Dir):
            dest.mkdir(parents=True, exist_ok=True)
        elif isinstance(entry, File):
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(entry.data or b"")
        elif isinstance(entry, (bytes, bytearray)):
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(bytes(entry))


def _rebase(script: str, root: Path) -> str:
    # boundary-aware so /out/out.txt rebases its prefix exactly once
    def sub(match: re.Match) -> str:
        return str(root / match.group(1).lstrip("/")) + match.group(2)

    return re.sub(r"(/work|/out|/in)(/|\s|$)", sub, script)
