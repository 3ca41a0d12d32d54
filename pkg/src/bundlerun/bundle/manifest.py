"""Bundle manifest: the structured metadata describing an experiment.

A manifest lists the recorded runs, declared input/output files, captured
environment variables, and origin OS information. Validation is strict:
anything the rest of the system relies on (absolute normalized paths,
unique names, non-empty runs) is enforced here, once.
"""

from __future__ import annotations

import json
import posixpath
from dataclasses import dataclass, field

from bundlerun.errors import InvalidManifest, PathTraversal, UnsupportedVersion

SUPPORTED_VERSIONS = ("1.0.0",)

MANIFEST_MEMBER = "METADATA/manifest.json"
DATA_TREE_MEMBER = "DATA/tree.tar.gz"

IO_ROLES = ("input", "output", "both")


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise InvalidManifest(message)


def check_abs_path(path: str, *, what: str) -> str:
    """Validate an absolute, normalized, traversal-free POSIX path."""
    if not isinstance(path, str) or not path.startswith("/"):
        raise InvalidManifest(f"{what}: path {path!r} must be absolute")
    parts = path.split("/")
    if ".." in parts:
        raise PathTraversal(f"{what}: path {path!r} contains a '..' segment")
    if path != posixpath.normpath(path):
        raise InvalidManifest(f"{what}: path {path!r} is not normalized")
    return path


@dataclass(frozen=True)
class IoFile:
    logical_name: str
    path: str
    role: str  # input | output | both

    def validate(self) -> None:
        _require(bool(self.logical_name), "io file needs a non-empty logical_name")
        _require(self.role in IO_ROLES, f"io file {self.logical_name!r}: bad role {self.role!r}")
        check_abs_path(self.path, what=f"io file {self.logical_name!r}")


@dataclass(frozen=True)
class RunSpec:
    run_id: str
    argv: tuple[str, ...]
    working_dir: str
    env_overrides: dict[str, str] = field(default_factory=dict)
    expected_exit: int = 0

    def validate(self) -> None:
        _require(bool(self.run_id), "run needs a non-empty run_id")
        _require(len(self.argv) > 0, f"run {self.run_id!r}: argv must be non-empty")
        _require(all(isinstance(a, str) for a in self.argv),
                 f"run {self.run_id!r}: argv entries must be strings")
        check_abs_path(self.working_dir, what=f"run {self.run_id!r} working_dir")


@dataclass(frozen=True)
class OsInfo:
    distribution: str
    distro_version: str
    architecture: str
    kernel_hint: str | None = None

    def validate(self) -> None:
        _require(bool(self.distribution), "os_info.distribution must be non-empty")
        _require(bool(self.architecture), "os_info.architecture must be non-empty")


@dataclass(frozen=True)
class PackageRecord:
    name: str
    version: str
    file_count: int

    def validate(self) -> None:
        _require(bool(self.name), "package record needs a name")
        _require(self.file_count >= 0, f"package {self.name!r}: file_count must be >= 0")


@dataclass(frozen=True)
class BundleManifest:
    format_version: str
    runs: tuple[RunSpec, ...]
    input_files: tuple[IoFile, ...]
    output_files: tuple[IoFile, ...]
    environment: dict[str, str]
    os_info: OsInfo
    package_records: tuple[PackageRecord, ...] = ()
    volatile_paths: tuple[str, ...] = ()

    def validate(self) -> None:
        if self.format_version not in SUPPORTED_VERSIONS:
            raise UnsupportedVersion(
                f"format_version {self.format_version!r} unsupported; "
                f"supported: {', '.join(SUPPORTED_VERSIONS)}"
            )
        _require(len(self.runs) > 0, "manifest must declare at least one run")
        run_ids = [r.run_id for r in self.runs]
        _require(len(set(run_ids)) == len(run_ids), "run ids must be unique")
        for run in self.runs:
            run.validate()
        for group, files in (("input", self.input_files), ("output", self.output_files)):
            names = [f.logical_name for f in files]
            _require(len(set(names)) == len(names),
                     f"{group}_files logical names must be unique")
            for f in files:
                f.validate()
        for f in self.input_files:
            _require(f.role in ("input", "both"),
                     f"input file {f.logical_name!r} has role {f.role!r}")
        for f in self.output_files:
            _require(f.role in ("output", "both"),
                     f"output file {f.logical_name!r} has role {f.role!r}")
        # A role-both file must be declared identically in both lists.
        both_in = {(f.logical_name, f.path) for f in self.input_files if f.role == "both"}
        both_out = {(f.logical_name, f.path) for f in self.output_files if f.role == "both"}
        _require(both_in == both_out,
                 "files with role 'both' must appear in input_files and output_files")
        for key, value in self.environment.items():
            _require(isinstance(key, str) and key != "", "environment keys must be non-empty")
            _require(isinstance(value, str), f"environment value for {key!r} must be a string")
        self.os_info.validate()
        for rec in self.package_records:
            rec.validate()
        for path in self.volatile_paths:
            check_abs_path(path, what="volatile path")


def list_io(manifest: BundleManifest) -> tuple[list[IoFile], list[IoFile]]:
    """Declared inputs and outputs in declaration order; role-both files show up in both."""
    return list(manifest.input_files), list(manifest.output_files)


def manifest_to_dict(manifest: BundleManifest) -> dict:
    doc: dict = {
        "format_version": manifest.format_version,
        "runs": [
            {
                "run_id": r.run_id,
                "argv": list(r.argv),
                "working_dir": r.working_dir,
                "env_overrides": dict(r.env_overrides),
                "expected_exit": r.expected_exit,
            }
            for r in manifest.runs
        ],
        "input_files": [
            {"logical_name": f.logical_name, "path": f.path, "role": f.role}
            for f in manifest.input_files
        ],
        "output_files": [
            {"logical_name": f.logical_name, "path": f.path, "role": f.role}
            for f in manifest.output_files
        ],
        "environment": dict(manifest.environment),
        "os_info": {
            "distribution": manifest.os_info.distribution,
            "distro_version": manifest.os_info.distro_version,
            "architecture": manifest.os_info.architecture,
        },
        "package_records": [
            {"name": p.name, "version": p.version, "file_count": p.file_count}
            for p in manifest.package_records
        ],
        "volatile_paths": list(manifest.volatile_paths),
    }
    if manifest.os_info.kernel_hint is not None:
        doc["os_info"]["kernel_hint"] = manifest.os_info.kernel_hint
    return doc


def manifest_to_canonical_json(manifest: BundleManifest) -> bytes:
    """Canonical form: UTF-8, sorted keys, no insignificant whitespace."""
    return json.dumps(
        manifest_to_dict(manifest), sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def _str_field(doc: dict, key: str, *, where: str) -> str:
    value = doc.get(key)
    if not isinstance(value, str):
        raise InvalidManifest(f"{where}: {key!r} must be a string")
    return value


def _str_map(value, *, where: str) -> dict[str, str]:
    if value is None:
        return {}
    if not isinstance(value, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in value.items()
    ):
        raise InvalidManifest(f"{where} must be a map of string to string")
    return dict(value)


def _io_files(value, *, where: str) -> tuple[IoFile, ...]:
    if not isinstance(value, list):
        raise InvalidManifest(f"{where} must be a list")
    out = []
    for i, entry in enumerate(value):
        if not isinstance(entry, dict):
            raise InvalidManifest(f"{where}[{i}] must be an object")
        out.append(
            IoFile(
                logical_name=_str_field(entry, "logical_name", where=f"{where}[{i}]"),
                path=_str_field(entry, "path", where=f"{where}[{i}]"),
                role=_str_field(entry, "role", where=f"{where}[{i}]"),
            )
        )
    return tuple(out)


def manifest_from_dict(doc: dict) -> BundleManifest:
    """Build and validate a manifest from its JSON document form."""
    if not isinstance(doc, dict):
        raise InvalidManifest("manifest document must be a JSON object")
    version = _str_field(doc, "format_version", where="manifest")
    runs_doc = doc.get("runs")
    if not isinstance(runs_doc, list):
        raise InvalidManifest("manifest: 'runs' must be a list")
    runs = []
    for i, entry in enumerate(runs_doc):
        if not isinstance(entry, dict):
            raise InvalidManifest(f"runs[{i}] must be an object")
        argv = entry.get("argv")
        if not isinstance(argv, list):
            raise InvalidManifest(f"runs[{i}]: 'argv' must be a list")
        expected = entry.get("expected_exit", 0)
        if not isinstance(expected, int) or isinstance(expected, bool):
            raise InvalidManifest(f"runs[{i}]: 'expected_exit' must be an integer")
        runs.append(
            RunSpec(
                run_id=_str_field(entry, "run_id", where=f"runs[{i}]"),
                argv=tuple(argv),
                working_dir=_str_field(entry, "working_dir", where=f"runs[{i}]"),
                env_overrides=_str_map(entry.get("env_overrides"), where=f"runs[{i}].env_overrides"),
                expected_exit=expected,
            )
        )
    os_doc = doc.get("os_info")
    if not isinstance(os_doc, dict):
        raise InvalidManifest("manifest: 'os_info' must be an object")
    kernel_hint = os_doc.get("kernel_hint")
    if kernel_hint is not None and not isinstance(kernel_hint, str):
        raise InvalidManifest("os_info.kernel_hint must be a string if present")
    packages = []
    for i, entry in enumerate(doc.get("package_records") or []):
        if not isinstance(entry, dict):
            raise InvalidManifest(f"package_records[{i}] must be an object")
        count = entry.get("file_count")
        if not isinstance(count, int) or isinstance(count, bool) or count < 0:
            raise InvalidManifest(f"package_records[{i}]: 'file_count' must be a nonneg integer")
        packages.append(
            PackageRecord(
                name=_str_field(entry, "name", where=f"package_records[{i}]"),
                version=_str_field(entry, "version", where=f"package_records[{i}]"),
                file_count=count,
            )
        )
    volatile = doc.get("volatile_paths") or []
    if not isinstance(volatile, list) or not all(isinstance(p, str) for p in volatile):
        raise InvalidManifest("volatile_paths must be a list of strings")
    manifest = BundleManifest(
        format_version=version,
        runs=tuple(runs),
        input_files=_io_files(doc.get("input_files") or [], where="input_files"),
        output_files=_io_files(doc.get("output_files") or [], where="output_files"),
        environment=_str_map(doc.get("environment"), where="environment"),
        os_info=OsInfo(
            distribution=_str_field(os_doc, "distribution", where="os_info"),
            distro_version=_str_field(os_doc, "distro_version", where="os_info"),
            architecture=_str_field(os_doc, "architecture", where="os_info"),
            kernel_hint=kernel_hint,
        ),
        package_records=tuple(packages),
        volatile_paths=tuple(volatile),
    )
    manifest.validate()
    return manifest


def manifest_from_json(data: bytes) -> BundleManifest:
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidManifest(f"manifest is not valid UTF-8 JSON: {exc}") from exc
    return manifest_from_dict(doc)
