"""Process wiring: a validated config becomes constructed components.

Everything stateful (database, object store, log spool, image registry)
lives outside the process, so any number of replicas built from the same
config serve interchangeably. The embedded dev registry is the one
exception and exists only for single-process development.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from bundlerun.backend.process import ProcessBackend
from bundlerun.backend.rootfs import provision_base_rootfs
from bundlerun.bundle import Bundle
from bundlerun.db import Database
from bundlerun.engine import ResourceLimits
from bundlerun.engine.executor import Executor
from bundlerun.engine.logs import LogDir
from bundlerun.engine.queue import JobQueue
from bundlerun.engine.worker import WorkerPool
from bundlerun.errors import BundlerunError
from bundlerun.images.builder import ImageStore
from bundlerun.images.devregistry import DevRegistry
from bundlerun.images.recipe import BaseTable, load_base_table
from bundlerun.images.registry import RegistryClient
from bundlerun.service.config import ServiceConfig
from bundlerun.service.ratelimit import RateLimiter
from bundlerun.sources import ProviderRegistry, SourceRecords
from bundlerun.storage import ref_from_json
from bundlerun.storage.filestore import FileStore

log = logging.getLogger(__name__)


@dataclass
class Services:
    config: ServiceConfig
    db: Database
    store: FileStore
    providers: ProviderRegistry
    records: SourceRecords
    queue: JobQueue
    images: ImageStore
    logs: LogDir
    executor: Executor
    pool: WorkerPool
    limiter: RateLimiter
    base_table: BaseTable
    build_pool: ThreadPoolExecutor
    dev_registry: DevRegistry | None = None

    @classmethod
    def from_config(cls, config: ServiceConfig, *, backend=None, provisioner=None) -> "Services":
        data = os.path.abspath(config.data_dir)
        os.makedirs(data, exist_ok=True)

        db = Database(os.path.join(data, "svc.sqlite"))
        store = FileStore(
            os.path.join(data, "store"),
            base_url=config.public_url,
            secret=config.secret,
            max_presign_ttl=config.presign_ttl_seconds,
        )

        dev_registry = None
        registry_url = config.registry_url
        if not registry_url:
            dev_registry = DevRegistry().start()
            registry_url = dev_registry.endpoint
            log.warning("no registry_url configured; embedded dev registry at %s", registry_url)
        registry = RegistryClient(registry_url)

        providers = ProviderRegistry(
            config.providers, timeout=config.provider_timeout_seconds
        )
        records = SourceRecords(
            db,
            store,
            providers,
            retention_days=config.upload_retention_days,
            size_limit=config.upload_cap_bytes,
        )
        queue = JobQueue(db, max_wall_seconds=config.max_wall_seconds)
        base_table = load_base_table(config.base_image_map_path or None)
        images = ImageStore(
            db,
            registry,
            os.path.join(data, "cache"),
            cache_limit_bytes=config.image_cache_limit_bytes,
            protected_digests=queue.protected_digests,
            provisioner=provisioner or provision_base_rootfs,
            base_table=base_table,
        )
        logs = LogDir(os.path.join(data, "logs"))
        if backend is None:
            backend = ProcessBackend(scratch_root=os.path.join(data, "scratch"))
        executor = Executor(
            db,
            queue,
            images,
            backend,
            store,
            logs,
            network=config.network_enabled,
            grace_seconds=config.grace_seconds,
        )
        pool = WorkerPool(queue, executor, size=config.workers)
        limiter = RateLimiter(config.rate_limit_per_minute, config.rate_limit_burst)
        build_pool = ThreadPoolExecutor(max_workers=2, thread_name_prefix="eager-build")
        return cls(
            config=config,
            db=db,
            store=store,
            providers=providers,
            records=records,
            queue=queue,
            images=images,
            logs=logs,
            executor=executor,
            pool=pool,
            limiter=limiter,
            base_table=base_table,
            build_pool=build_pool,
            dev_registry=dev_registry,
        )

    def start(self) -> "Services":
        self.pool.start(recover=self.config.recover_on_start)
        return self

    def stop(self) -> None:
        self.pool.stop()
        self.build_pool.shutdown(wait=True)
        self.providers.close()
        if self.dev_registry is not None:
            self.dev_registry.stop()
        self.db.close()

    def default_limits(self) -> ResourceLimits:
        return ResourceLimits(
            wall_clock_seconds=self.config.default_wall_seconds,
            memory_bytes=self.config.default_memory_bytes,
            log_bytes_cap=self.config.log_cap_bytes,
            output_bytes_cap=self.config.output_cap_bytes,
        )

    def sweep(self, *, now: float | None = None) -> dict[str, int]:
        """Retire expired stored bytes; run from cron via `bundlerun sweep`.

        Records stay (canonical paths are permanent; expired lookups answer
        SourceGone) — only blobs and input uploads are reclaimed.
        """
        now = time.time() if now is None else now
        upload_cutoff = now - self.config.upload_retention_days * 86400
        artifact_cutoff = now - self.config.artifact_retention_days * 86400
        removed = {"input_uploads": 0, "bundle_blobs": 0, "job_blobs": 0}
        conn = self.db.connect()

        for row in conn.execute(
            "SELECT upload_id, ref_json FROM uploads WHERE created_at < ?",
            (upload_cutoff,),
        ).fetchall():
            self.store.delete(ref_from_json(row["ref_json"]).key)
            with self.db.tx():
                conn.execute(
                    "DELETE FROM uploads WHERE upload_id = ?", (row["upload_id"],)
                )
            removed["input_uploads"] += 1

        # an ephemeral bundle blob may be shared with a repository record of
        # the same digest; those stay refetchable, so only orphans go
        for row in conn.execute(
            "SELECT DISTINCT bundle_digest AS d FROM reproductions"
            " WHERE source_kind = 'upload' AND created_at < ?",
            (upload_cutoff,),
        ).fetchall():
            keeper = conn.execute(
                "SELECT 1 FROM reproductions WHERE bundle_digest = ? AND"
                " (source_kind != 'upload' OR created_at >= ?) LIMIT 1",
                (row["d"], upload_cutoff),
            ).fetchone()
            key = f"bundles/{row['d']}"
            if keeper is None and self.store.exists(key):
                self.store.delete(key)
                removed["bundle_blobs"] += 1

        for row in conn.execute(
            "SELECT job_id, outputs_json, log_ref FROM jobs"
            " WHERE finished_at IS NOT NULL AND finished_at < ?",
            (artifact_cutoff,),
        ).fetchall():
            refs = [e["ref"] for e in json.loads(row["outputs_json"])]
            if row["log_ref"]:
                refs.append(json.loads(row["log_ref"]))
            for ref in refs:
                if self.store.exists(ref["key"]):
                    self.store.delete(ref["key"])
                    removed["job_blobs"] += 1
            try:
                os.unlink(self.logs.path(row["job_id"]))
            except OSError:
                pass
        return removed

    def schedule_build(self, bundle: Bundle) -> None:
        """Fire-and-forget image build; takes ownership of `bundle`."""

        def build():
            try:
                self.images.ensure_image(bundle)
            except BundlerunError as exc:
                log.warning("eager build failed: %s", exc)
            except Exception:
                log.exception("eager build crashed")
            finally:
                bundle.close()

        self.build_pool.submit(build)
