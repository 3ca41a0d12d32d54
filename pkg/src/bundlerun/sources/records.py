"""Reproduction records: the persistence behind permanent URLs.

Every reproducible thing the service knows about is one row — either an
ephemeral upload reachable at /reproduce/<short_id>, or a repository
bundle reachable at /reproduce/<provider>/<external_id> forever. The row
carries the bundle digest, the blob location, and a manifest summary so
page rendering never has to re-parse the bundle.

Uniqueness (of live short ids and of canonical paths) is enforced by the
database's partial unique indexes, not by in-process locks, so multiple
replicas can mint and register concurrently.
"""

from __future__ import annotations

import json
import random
import sqlite3
import tempfile
import time
import uuid
from dataclasses import dataclass, replace
from typing import BinaryIO, Callable

from bundlerun.bundle import Bundle, BundleManifest, parse_bundle
from bundlerun.bundle.digest import digest_stream
from bundlerun.bundle.reader import DEFAULT_SIZE_LIMIT
from bundlerun.db import Database
from bundlerun.errors import (
    DigestMismatch,
    InconsistentManifest,
    MalformedArchive,
    MalformedDataTree,
    NotABundle,
    NotFound,
    PathTraversal,
    SourceGone,
    StorageUnavailable,
    UnknownObject,
    UnsupportedVersion,
)
from bundlerun.sources import shortid
from bundlerun.sources.providers import (
    EPHEMERAL,
    UPLOAD_PROVIDER,
    ProviderRegistry,
    SourceRef,
    download_source,
)
from bundlerun.storage import ArtifactRef, ObjectStore, ref_from_json, ref_to_json

DEFAULT_RETENTION_DAYS = 30

# a replaced/corrupt source file fails parsing; these all mean "not a bundle"
_PARSE_ERRORS = (
    MalformedArchive,
    UnsupportedVersion,
    PathTraversal,
    InconsistentManifest,
    MalformedDataTree,
)

_MINT_ATTEMPTS = 64


def manifest_summary(manifest: BundleManifest) -> dict:
    """The slice of a manifest a reproduction page needs."""
    return {
        "runs": [
            {
                "run_id": r.run_id,
                "argv": list(r.argv),
                "working_dir": r.working_dir,
                "expected_exit": r.expected_exit,
                "env_overrides": dict(r.env_overrides),
            }
            for r in manifest.runs
        ],
        "input_files": [
            {"logical_name": f.logical_name, "path": f.path} for f in manifest.input_files
        ],
        "output_files": [
            {"logical_name": f.logical_name, "path": f.path} for f in manifest.output_files
        ],
        "environment": dict(manifest.environment),
        "os": {
            "distribution": manifest.os_info.distribution,
            "version": manifest.os_info.distro_version,
            "architecture": manifest.os_info.architecture,
        },
    }


@dataclass(frozen=True)
class ReproRecord:
    repro_id: str
    canonical_path: str
    short_id: str | None
    source: SourceRef
    bundle_digest: str
    bundle_ref: ArtifactRef
    summary: dict
    created_at: float
    current: bool = True
    superseded_by: str | None = None


def _record(row: sqlite3.Row) -> ReproRecord:
    return ReproRecord(
        repro_id=row["repro_id"],
        canonical_path=row["canonical_path"],
        short_id=row["short_id"],
        source=SourceRef.from_json(row["source_ref"]),
        bundle_digest=row["bundle_digest"],
        bundle_ref=ref_from_json(row["bundle_ref"]),
        summary=json.loads(row["summary_json"]),
        created_at=row["created_at"],
        current=bool(row["current"]),
        superseded_by=row["superseded_by"],
    )


class SourceRecords:
    def __init__(
        self,
        db: Database,
        store: ObjectStore,
        providers: ProviderRegistry,
        *,
        rng: random.Random | None = None,
        retention_days: float = DEFAULT_RETENTION_DAYS,
        size_limit: int = DEFAULT_SIZE_LIMIT,
        clock: Callable[[], float] = time.time,
    ):
        self._db = db
        self._store = store
        self._providers = providers
        self._rng = rng if rng is not None else random.Random()
        self._retention_days = retention_days
        self._size_limit = size_limit
        self._clock = clock

    # -- intake ---------------------------------------------------------

    def ingest(self, stream: BinaryIO) -> tuple[Bundle, ArtifactRef]:
        """Parse and validate a bundle stream, then store the exact bytes.

        Parsing happens before anything is persisted, so a malformed
        upload is rejected without leaving a blob behind.
        """
        spool = tempfile.TemporaryFile(prefix="ingest-")
        try:
            copied = 0
            while True:
                chunk = stream.read(65536)
                if not chunk:
                    break
                copied += len(chunk)
                spool.write(chunk)
            spool.seek(0)
            bundle = parse_bundle(spool, size_limit=self._size_limit)
        except BaseException:
            spool.close()
            raise
        try:
            spool.seek(0)
            ref = self._store.put_artifact("bundles", bundle.content_digest, spool)
        except BaseException:
            bundle.close()
            raise
        finally:
            spool.close()
        return bundle, ref

    def mint_short_id(self, bundle: Bundle, blob: ArtifactRef) -> ReproRecord:
        """Create a fresh ephemeral record for an uploaded bundle.

        Each upload gets its own id even for byte-identical content. A
        collision with a live id surfaces as a unique-index violation;
        we retry with new randomness, growing the length if collisions
        repeat.
        """
        summary = json.dumps(manifest_summary(bundle.manifest), sort_keys=True)
        now = self._clock()
        for attempt in range(_MINT_ATTEMPTS):
            sid = shortid.mint(self._rng, shortid.length_for_attempt(attempt))
            repro_id = uuid.uuid4().hex[:12]
            source = SourceRef(
                UPLOAD_PROVIDER, sid, persistence_class=EPHEMERAL,
                resolved_bundle_digest=bundle.content_digest,
            )
            try:
                with self._db.tx(immediate=True) as conn:
                    conn.execute(
                        """
                        INSERT INTO reproductions
                            (repro_id, short_id, canonical_path, source_kind,
                             source_ref, bundle_digest, bundle_ref, summary_json,
                             created_at, current)
                        VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, 1)
                        """,
                        (
                            repro_id,
                            sid,
                            f"/reproduce/{sid}",
                            UPLOAD_PROVIDER,
                            source.to_json(),
                            bundle.content_digest,
                            ref_to_json(blob),
                            summary,
                            now,
                        ),
                    )
            except sqlite3.IntegrityError:
                continue  # live id taken: new randomness, eventually more length
            except sqlite3.Error as exc:
                raise StorageUnavailable(f"could not persist short id: {exc}") from exc
            return self.get(repro_id)
        raise StorageUnavailable(
            f"no free short id after {_MINT_ATTEMPTS} attempts"
        )

    # -- resolution -----------------------------------------------------

    def resolve_source(self, provider: str, external_id: str | None = None) -> SourceRef:
        """Turn a URL path into a concrete source.

        Two-segment paths name a registered provider; single-segment
        paths are short ids of stored uploads.
        """
        if external_id is None:
            rec = self.lookup_short(provider)
            return replace(rec.source, resolved_bundle_digest=rec.bundle_digest)
        return self._providers.get(provider).resolve(external_id)

    def fetch_source(self, source: SourceRef) -> tuple[Bundle, ArtifactRef]:
        """Download a freshly resolved source, validate it, store the bytes."""
        spool = tempfile.TemporaryFile(prefix="fetch-")
        try:
            download_source(
                self._providers.client, source, spool, size_cap=self._size_limit
            )
            spool.seek(0)
            try:
                bundle = parse_bundle(spool, size_limit=self._size_limit)
            except _PARSE_ERRORS as exc:
                raise NotABundle(
                    f"{source.provider}:{source.external_id}: {exc}"
                ) from exc
            try:
                spool.seek(0)
                ref = self._store.put_artifact("bundles", bundle.content_digest, spool)
            except BaseException:
                bundle.close()
                raise
            return bundle, ref
        finally:
            spool.close()

    # -- registration ---------------------------------------------------

    def register_reproduction(
        self, source: SourceRef, bundle: Bundle, blob: ArtifactRef
    ) -> ReproRecord:
        """Persist the permanent mapping for a repository-hosted bundle.

        Idempotent for the same (provider, external_id, digest). If the
        provider's content changed, the old record is superseded (kept,
        current=0) and DigestMismatch is raised with the fresh record on
        its `.record` attribute — the caller decides how loudly to warn.
        """
        path = f"/reproduce/{source.provider}/{source.external_id}"
        summary = json.dumps(manifest_summary(bundle.manifest), sort_keys=True)
        superseded: str | None = None
        new_id = ""
        for _ in range(4):  # concurrent registration retries
            new_id = uuid.uuid4().hex[:12]
            try:
                with self._db.tx(immediate=True) as conn:
                    row = conn.execute(
                        "SELECT * FROM reproductions WHERE canonical_path = ? AND current = 1",
                        (path,),
                    ).fetchone()
                    if row is not None:
                        if row["bundle_digest"] == bundle.content_digest:
                            return _record(row)
                        conn.execute(
                            "UPDATE reproductions SET current = 0, superseded_by = ? "
                            "WHERE repro_id = ?",
                            (new_id, row["repro_id"]),
                        )
                        superseded = row["bundle_digest"]
                    conn.execute(
                        """
                        INSERT INTO reproductions
                            (repro_id, short_id, canonical_path, source_kind,
                             source_ref, bundle_digest, bundle_ref, summary_json,
                             created_at, current)
                        VALUES (?, NULL, ?, ?, ?, ?, ?, ?, ?, 1)
                        """,
                        (
                            new_id,
                            path,
                            source.provider,
                            source.to_json(),
                            bundle.content_digest,
                            ref_to_json(blob),
                            summary,
                            self._clock(),
                        ),
                    )
                break
            except sqlite3.IntegrityError:
                continue  # lost a registration race; re-read and reconcile
            except sqlite3.Error as exc:
                raise StorageUnavailable(f"could not register reproduction: {exc}") from exc
        else:
            raise StorageUnavailable(f"registration kept colliding for {path}")
        record = self.get(new_id)
        if superseded is not None:
            exc = DigestMismatch(
                f"{path}: provider content changed (digest {superseded[:12]} -> "
                f"{bundle.content_digest[:12]}); previous record superseded"
            )
            exc.record = record
            raise exc
        return record

    # -- lookups --------------------------------------------------------

    def get(self, repro_id: str) -> ReproRecord:
        row = self._db.connect().execute(
            "SELECT * FROM reproductions WHERE repro_id = ?", (repro_id,)
        ).fetchone()
        if row is None:
            raise NotFound(f"unknown reproduction {repro_id!r}")
        return _record(row)

    def lookup_short(self, short_id: str) -> ReproRecord:
        if shortid.is_short_id(short_id):
            row = self._db.connect().execute(
                "SELECT * FROM reproductions WHERE short_id = ? AND current = 1",
                (short_id,),
            ).fetchone()
            if row is not None:
                return _record(row)
        raise NotFound(f"unknown short id {short_id!r}")

    def lookup_path(self, canonical_path: str) -> ReproRecord:
        row = self._db.connect().execute(
            "SELECT * FROM reproductions WHERE canonical_path = ? AND current = 1",
            (canonical_path,),
        ).fetchone()
        if row is None:
            raise NotFound(f"no reproduction at {canonical_path!r}")
        return _record(row)

    # -- fetch ----------------------------------------------------------

    def fetch_bundle(self, record: ReproRecord) -> Bundle:
        """Return the record's bundle: blob cache first, else re-download.

        The digest stored at registration is the contract; nothing that
        hashes differently is ever returned without DigestMismatch.
        """
        if record.source.persistence_class == EPHEMERAL:
            age = self._clock() - record.created_at
            if age > self._retention_days * 86400:
                raise SourceGone(
                    f"upload {record.short_id or record.repro_id} expired after "
                    f"{self._retention_days:g} days"
                )
        cached = self._from_cache(record)
        if cached is not None:
            return cached
        if record.source.provider == UPLOAD_PROVIDER:
            raise SourceGone("uploaded bundle is no longer stored")
        try:
            source = self.resolve_source(
                record.source.provider, record.source.external_id
            )
        except NotFound as exc:
            raise SourceGone(str(exc)) from exc
        spool = tempfile.TemporaryFile(prefix="refetch-")
        try:
            download_source(
                self._providers.client, source, spool, size_cap=self._size_limit
            )
            spool.seek(0)
            digest = digest_stream(spool)
            if digest != record.bundle_digest:
                raise DigestMismatch(
                    f"{record.canonical_path}: re-downloaded content hashes to "
                    f"{digest[:12]}, record expects {record.bundle_digest[:12]}"
                )
            spool.seek(0)
            bundle = parse_bundle(spool, size_limit=self._size_limit)
            spool.seek(0)
            self._store.put_artifact("bundles", digest, spool)
            return bundle
        finally:
            spool.close()

    def _from_cache(self, record: ReproRecord) -> Bundle | None:
        if not self._store.exists(record.bundle_ref.key):
            return None
        spool = tempfile.TemporaryFile(prefix="cache-")
        try:
            # the store verifies blob digests while streaming, so a
            # tampered cache entry surfaces here as DigestMismatch
            for chunk in self._store.get_artifact(record.bundle_ref):
                spool.write(chunk)
            spool.seek(0)
            bundle = parse_bundle(spool, size_limit=self._size_limit)
        except _PARSE_ERRORS + (DigestMismatch, UnknownObject):
            return None  # damaged cache entry; treat as a miss
        finally:
            spool.close()
        if bundle.content_digest != record.bundle_digest:
            bundle.close()
            return None
        return bundle
