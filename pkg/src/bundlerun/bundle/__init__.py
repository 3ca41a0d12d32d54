"""Experiment bundle format: types, parsing, validation, fixture writing."""

from bundlerun.bundle.digest import content_digest, digest_file, digest_stream
from bundlerun.bundle.manifest import (
    SUPPORTED_VERSIONS,
    BundleManifest,
    IoFile,
    OsInfo,
    PackageRecord,
    RunSpec,
    list_io,
    manifest_from_dict,
    manifest_to_canonical_json,
)
from bundlerun.bundle.reader import Bundle, DataTreeHandle, parse_bundle
from bundlerun.bundle.writer import Dir, File, Symlink, pack_fixture_bundle

__all__ = [
    "Bundle",
    "BundleManifest",
    "DataTreeHandle",
    "Dir",
    "File",
    "IoFile",
    "OsInfo",
    "PackageRecord",
    "RunSpec",
    "SUPPORTED_VERSIONS",
    "Symlink",
    "content_digest",
    "digest_file",
    "digest_stream",
    "list_io",
    "manifest_from_dict",
    "manifest_to_canonical_json",
    "pack_fixture_bundle",
    "parse_bundle",
]
