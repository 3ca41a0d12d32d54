"""HTTP surface: upload and link intake, reproduction pages, runs, logs.

Handlers are synchronous on purpose — every operation below them
(sqlite, object store, bundle parsing) blocks, and FastAPI runs sync
handlers on its thread pool, which also bounds per-connection cost for
the long-lived log streams.
"""

from __future__ import annotations

import json
import os
import time
import uuid
from contextlib import asynccontextmanager
from typing import Iterator

from fastapi import FastAPI, File, Request, UploadFile
from fastapi.responses import FileResponse, JSONResponse, StreamingResponse
from pydantic import BaseModel, Field

from bundlerun.engine import ResourceLimits, RunOverrides
from bundlerun.engine.state import TERMINAL_STATES
from bundlerun.errors import (
    AmbiguousArticle,
    BaseImagePullFailed,
    BundlerunError,
    DigestMismatch,
    InconsistentManifest,
    InvalidOverride,
    LimitsExceedPolicy,
    MalformedArchive,
    MalformedDataTree,
    NotABundle,
    NotFound,
    OffsetOutOfRange,
    PathTraversal,
    ProviderUnavailable,
    QueueFull,
    RateLimited,
    RegistryUnavailable,
    SizeLimitExceeded,
    SourceGone,
    StorageUnavailable,
    StoreUnavailable,
    TtlExceedsPolicy,
    UnknownBundle,
    UnknownJob,
    UnknownObject,
    UnknownProvider,
    UnsupportedArchitecture,
    UnsupportedVersion,
)
from bundlerun.images.recipe import BaseTable
from bundlerun.service.wiring import Services
from bundlerun.sources.records import ReproRecord
from bundlerun.storage import ArtifactRef, ref_from_json, ref_to_json

_STATUS: tuple[tuple[type[BundlerunError], int], ...] = (
    (OffsetOutOfRange, 416),
    (SizeLimitExceeded, 413),
    (TtlExceedsPolicy, 422),
    (LimitsExceedPolicy, 422),
    (InvalidOverride, 422),
    (NotABundle, 422),
    (AmbiguousArticle, 422),
    (UnsupportedArchitecture, 422),
    (QueueFull, 429),
    (RateLimited, 429),
    (ProviderUnavailable, 502),
    (StorageUnavailable, 503),
    (StoreUnavailable, 503),
    (RegistryUnavailable, 503),
    (BaseImagePullFailed, 503),
    (DigestMismatch, 409),
    (SourceGone, 404),
    (NotFound, 404),
    (UnknownProvider, 404),
    (UnknownJob, 404),
    (UnknownBundle, 404),
    (UnknownObject, 404),
    (MalformedArchive, 400),
    (MalformedDataTree, 400),
    (PathTraversal, 400),
    (InconsistentManifest, 400),
    (UnsupportedVersion, 400),
)


def _status_for(exc: BundlerunError) -> int:
    for kind, code in _STATUS:
        if isinstance(exc, kind):
            return code
    return 500


class RunRequest(BaseModel):
    runs: list[str] | None = None  # subset of run ids; None runs everything
    argv: dict[str, list[str]] = Field(default_factory=dict)
    env: dict[str, dict[str, str]] = Field(default_factory=dict)
    inputs: dict[str, str] = Field(default_factory=dict)  # logical name -> upload_id
    wall_clock_seconds: int | None = None
    memory_bytes: int | None = None


def create_app(services: Services, *, manage_lifecycle: bool = True) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if manage_lifecycle:
            services.start()
        try:
            yield
        finally:
            if manage_lifecycle:
                services.stop()

    app = FastAPI(title="bundlerun", docs_url=None, redoc_url=None, lifespan=lifespan)
    app.state.services = services
    config = services.config

    @app.exception_handler(BundlerunError)
    async def typed_error(request: Request, exc: BundlerunError):
        return JSONResponse(
            {"error": type(exc).__name__, "detail": str(exc)},
            status_code=_status_for(exc),
        )

    def check_rate(request: Request) -> None:
        client = request.client.host if request.client else "unknown"
        if not services.limiter.allow(client):
            raise RateLimited(f"request budget exhausted for {client}")

    def check_length(request: Request) -> None:
        raw = request.headers.get("content-length")
        # 64 KiB of slack for the multipart framing around the file part
        if raw and raw.isdigit() and int(raw) > config.upload_cap_bytes + 65536:
            raise SizeLimitExceeded(
                f"request body exceeds the {config.upload_cap_bytes}-byte upload cap"
            )

    def wants_html(request: Request) -> bool:
        return bool(config.static_dir) and "text/html" in request.headers.get("accept", "")

    def spa_index() -> FileResponse:
        return FileResponse(os.path.join(config.static_dir, "index.html"))

    # -- intake -----------------------------------------------------------

    @app.post("/api/upload")
    def post_upload(request: Request, bundle: UploadFile = File(...)):
        check_rate(request)
        check_length(request)
        parsed, blob = services.records.ingest(bundle.file)
        try:
            rec = services.records.mint_short_id(parsed, blob)
        except BaseException:
            parsed.close()
            raise
        services.schedule_build(parsed)  # eager: the page's first run skips the wait
        return {"short_id": rec.short_id, "reproduce_path": rec.canonical_path}

    @app.post("/api/input")
    def post_input(request: Request, file: UploadFile = File(...)):
        check_rate(request)
        check_length(request)
        upload_id = uuid.uuid4().hex[:12]
        ref = services.store.put_artifact(
            "uploads", upload_id, file.file, size_cap=config.upload_cap_bytes
        )
        conn = services.db.connect()
        with services.db.tx():
            conn.execute(
                "INSERT INTO uploads (upload_id, ref_json, filename, size_bytes,"
                " content_digest, created_at) VALUES (?, ?, ?, ?, ?, ?)",
                (
                    upload_id,
                    ref_to_json(ref),
                    file.filename or upload_id,
                    ref.size_bytes,
                    ref.digest,
                    time.time(),
                ),
            )
        return {"upload_id": upload_id, "size_bytes": ref.size_bytes}

    # -- reproduction pages -------------------------------------------------

    def page_data(rec: ReproRecord) -> dict:
        return {
            "repro_id": rec.repro_id,
            "canonical_path": rec.canonical_path,
            "short_id": rec.short_id,
            "provider": rec.source.provider,
            "external_id": rec.source.external_id,
            "persistence_class": rec.source.persistence_class,
            "bundle_digest": rec.bundle_digest,
            "created_at": rec.created_at,
            "summary": rec.summary,
            "base_image_warning": _base_warning(services.base_table, rec.summary),
            "links": {"run": f"/api/run/{rec.repro_id}"},
        }

    @app.get("/reproduce/{token}")
    def get_short(token: str, request: Request):
        if wants_html(request):
            return spa_index()
        return page_data(services.records.lookup_short(token))

    @app.get("/reproduce/{provider}/{external_id}")
    def get_repository(provider: str, external_id: str, request: Request):
        if wants_html(request):
            return spa_index()
        path = f"/reproduce/{provider}/{external_id}"
        try:
            rec = services.records.lookup_path(path)
        except NotFound:
            rec = _first_visit(services, provider, external_id)
        return page_data(rec)

    # -- runs ---------------------------------------------------------------

    @app.post("/api/run/{repro}", status_code=202)
    def post_run(repro: str, request: Request, body: RunRequest | None = None):
        check_rate(request)
        body = body or RunRequest()
        rec = _find_record(services, repro)
        if services.queue.queued_count() >= config.queue_limit:
            raise QueueFull(f"queue is at its {config.queue_limit}-job bound")
        bundle, rec = _runnable_bundle(services, rec)
        try:
            overrides = RunOverrides(
                argv_replacements={k: tuple(v) for k, v in body.argv.items()},
                env_patches=body.env,
                input_uploads=body.inputs,
            )
            defaults = services.default_limits()
            limits = ResourceLimits(
                wall_clock_seconds=body.wall_clock_seconds or defaults.wall_clock_seconds,
                memory_bytes=body.memory_bytes or defaults.memory_bytes,
                log_bytes_cap=defaults.log_bytes_cap,
                output_bytes_cap=defaults.output_bytes_cap,
            )
            job_id = services.queue.submit(
                rec.repro_id,
                bundle.manifest,
                run_selection=tuple(body.runs) if body.runs else (),
                overrides=overrides,
                limits=limits,
            )
        finally:
            bundle.close()
        return {
            "job_id": job_id,
            "repro_id": rec.repro_id,
            "status_url": f"/api/status/{job_id}",
            "log_url": f"/api/log/{job_id}",
        }

    # -- job introspection ----------------------------------------------------

    @app.get("/api/status/{job_id}")
    def get_status(job_id: str):
        row = services.queue.get(job_id)
        state = row["state"]
        outputs = []
        for entry in json.loads(row["outputs_json"]):
            ref = ArtifactRef(**entry["ref"])
            item = {
                "logical_name": entry["logical_name"],
                "size_bytes": ref.size_bytes,
                "download_url": f"/api/output/{job_id}/{entry['logical_name']}",
            }
            if state in TERMINAL_STATES:
                try:
                    item["presigned_url"] = services.store.presign_download(
                        ref, config.presign_ttl_seconds
                    )
                except (UnknownObject, TtlExceedsPolicy):
                    pass
            outputs.append(item)
        return {
            "job_id": job_id,
            "repro_id": row["repro_id"],
            "state": state,
            "queue_position": services.queue.position(job_id) if state == "QUEUED" else None,
            "created_at": row["created_at"],
            "started_at": row["started_at"],
            "finished_at": row["finished_at"],
            "termination": row["termination"],
            "error": row["error"],
            "runs": json.loads(row["runs_json"]),
            "outputs": outputs,
            "log_url": f"/api/log/{job_id}",
        }

    @app.get("/api/log/{job_id}")
    def get_log(job_id: str, offset: int = 0):
        services.queue.get(job_id)  # 404 before a byte is streamed

        def live() -> bool:
            return services.queue.state_of(job_id) not in TERMINAL_STATES

        if services.logs.size(job_id) == 0 and not live():
            # this replica never spooled the log; serve the finalized blob
            data = _finalized_log(services, job_id)
            if offset < 0 or offset > len(data):
                raise OffsetOutOfRange(f"offset {offset} beyond log size {len(data)}")
            tail = data[offset:]
            return StreamingResponse(
                iter([tail] if tail else []), media_type="application/octet-stream"
            )

        # surface bad offsets as a 416 instead of a broken stream
        services.logs.read(job_id, offset, is_live=live, wait_seconds=0.0)

        def stream() -> Iterator[bytes]:
            at = offset
            while True:
                chunk, at, end = services.logs.read(
                    job_id, at, is_live=live, wait_seconds=15.0
                )
                if chunk:
                    yield chunk
                if end:
                    return

        return StreamingResponse(stream(), media_type="application/octet-stream")

    @app.get("/api/output/{job_id}/{logical_name}")
    def get_output(job_id: str, logical_name: str):
        row = services.queue.get(job_id)
        entry = next(
            (
                e
                for e in json.loads(row["outputs_json"])
                if e["logical_name"] == logical_name
            ),
            None,
        )
        if entry is None:
            raise NotFound(f"job {job_id} has no output {logical_name!r}")
        ref = ArtifactRef(**entry["ref"])
        safe_name = logical_name.replace('"', "")
        return StreamingResponse(
            services.store.get_artifact(ref),
            media_type=ref.content_type,
            headers={
                "Content-Length": str(ref.size_bytes),
                "Content-Disposition": f'attachment; filename="{safe_name}"',
            },
        )

    @app.get("/api/blob/{key:path}")
    def get_blob(key: str, expires: int, sig: str):
        if not services.store.verify_presigned(key, expires, sig):
            return JSONResponse(
                {"error": "Forbidden", "detail": "bad or expired signature"},
                status_code=403,
            )
        chunks, size = services.store.stream_key(key)
        return StreamingResponse(
            chunks,
            media_type="application/octet-stream",
            headers={"Content-Length": str(size)},
        )

    # -- service ---------------------------------------------------------------

    @app.get("/healthz")
    def healthz():
        return {
            "ok": True,
            "workers": config.workers,
            "queued": services.queue.queued_count(),
            "running": services.queue.running_count(),
        }

    @app.get("/")
    def root(request: Request):
        if wants_html(request):
            return spa_index()
        return {
            "service": "bundlerun",
            "upload": "/api/upload",
            "health": "/healthz",
            "providers": services.providers.names(),
        }

    if config.static_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/static", StaticFiles(directory=config.static_dir), name="static")

    return app


# -- helpers shared by handlers --------------------------------------------


def _base_warning(table: BaseTable, summary: dict) -> str | None:
    os_meta = summary.get("os", {})
    arch = os_meta.get("architecture", "")
    if arch and arch not in table.supported_architectures:
        return f"architecture {arch} is unsupported; runs will fail"
    key = f"{os_meta.get('distribution', '?')}/{os_meta.get('version', '?')}"
    if key in table.mapping:
        return None
    return f"no exact base image for {key}; using fallback {table.fallback_ref}"


def _first_visit(services: Services, provider: str, external_id: str) -> ReproRecord:
    source = services.records.resolve_source(provider, external_id)
    bundle, blob = services.records.fetch_source(source)
    try:
        try:
            rec = services.records.register_reproduction(source, bundle, blob)
        except DigestMismatch as exc:
            rec = exc.record  # superseded: the permanent path now serves this
        services.schedule_build(bundle)
        bundle = None
        return rec
    finally:
        if bundle is not None:
            bundle.close()


def _find_record(services: Services, token: str) -> ReproRecord:
    try:
        return services.records.get(token)
    except NotFound:
        return services.records.lookup_short(token)


def _runnable_bundle(services: Services, rec: ReproRecord):
    """Bundle for a run, refreshing the registration if upstream changed."""
    try:
        return services.records.fetch_bundle(rec), rec
    except DigestMismatch:
        source = services.records.resolve_source(
            rec.source.provider, rec.source.external_id
        )
        bundle, blob = services.records.fetch_source(source)
        try:
            fresh = services.records.register_reproduction(source, bundle, blob)
        except DigestMismatch as exc:
            fresh = exc.record
        return bundle, fresh


def _finalized_log(services: Services, job_id: str) -> bytes:
    row = services.queue.get(job_id)
    raw = row["log_ref"]
    if not raw:
        return b""
    try:
        return b"".join(services.store.get_artifact(ref_from_json(raw)))
    except (UnknownObject, DigestMismatch):
        return b""
