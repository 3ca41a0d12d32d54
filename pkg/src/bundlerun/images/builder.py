"""Image building and the content-addressed cache.

An image is identified by the digest of its registry manifest, which is a
pure function of the image content — layer bytes are packed deterministically
and no timestamps enter the image itself — so rebuilding the same bundle
yields the same image digest. The registry is the durable shared cache;
materialized rootfs directories are a size-bounded local LRU in front of it.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import shutil
import tempfile
import threading
import time
from typing import Callable
from uuid import uuid4

from bundlerun.bundle.extract import extract_tree
from bundlerun.bundle.reader import Bundle
from bundlerun.db import Database
from bundlerun.errors import (
    BaseImagePullFailed,
    ImageMissing,
    RegistryUnavailable,
)
from bundlerun.images import ImageRecipe, ImageRef
from bundlerun.images.layer import extract_layer, pack_layer
from bundlerun.images.recipe import BaseTable, derive_recipe
from bundlerun.images.registry import MANIFEST_TYPE, RegistryClient, digest_of
from bundlerun.backend.rootfs import copy_rootfs, provision_base_rootfs

log = logging.getLogger(__name__)

CONFIG_TYPE = "application/vnd.oci.image.config.v1+json"
LAYER_TYPE = "application/vnd.oci.image.layer.v1.tar+gzip"


class _Flight:
    def __init__(self):
        self.done = threading.Event()
        self.result: tuple[ImageRef, str] | None = None
        self.error: BaseException | None = None


class ImageStore:
    def __init__(
        self,
        db: Database,
        registry: RegistryClient,
        cache_dir: str,
        *,
        cache_limit_bytes: int | None = None,
        protected_digests: Callable[[], set[str]] | None = None,
        provisioner: Callable[[str], None] = provision_base_rootfs,
        base_table: BaseTable | None = None,
    ):
        self._db = db
        self._registry = registry
        self._cache = cache_dir
        self._cache_limit = cache_limit_bytes
        self._protected = protected_digests or (lambda: set())
        self._provisioner = provisioner
        self._base_table = base_table
        self._flight_lock = threading.Lock()
        self._inflight: dict[str, _Flight] = {}
        self._base_lock = threading.Lock()
        self.builds_started = 0  # instrumentation: cache hits keep this flat
        for sub in ("bases", "rootfs", "tmp"):
            os.makedirs(os.path.join(cache_dir, sub), exist_ok=True)

    # -- public API ---------------------------------------------------------

    def ensure_image(self, bundle: Bundle) -> tuple[ImageRef, str]:
        """Return (ref, local rootfs dir), building only when needed.

        Concurrent calls for the same bundle digest coalesce into a single
        build; every waiter gets the leader's result.
        """
        digest = bundle.content_digest
        with self._flight_lock:
            flight = self._inflight.get(digest)
            leader = flight is None
            if leader:
                flight = _Flight()
                self._inflight[digest] = flight
        if not leader:
            flight.done.wait()
            if flight.error is not None:
                raise flight.error
            assert flight.result is not None
            return flight.result
        try:
            result = self._ensure(bundle)
            flight.result = result
            return result
        except BaseException as exc:
            flight.error = exc
            raise
        finally:
            flight.done.set()
            with self._flight_lock:
                self._inflight.pop(digest, None)

    def lookup_cached(self, bundle_digest: str) -> ImageRef | None:
        conn = self._db.connect()
        row = conn.execute(
            "SELECT * FROM images WHERE bundle_digest = ?", (bundle_digest,)
        ).fetchone()
        if row is None:
            return None
        if not self._registry.manifest_exists(row["image_digest"]):
            # the registry lost the image; repair the stale row
            with self._db.tx(immediate=True) as tx:
                tx.execute(
                    "DELETE FROM images WHERE bundle_digest = ?", (bundle_digest,)
                )
            return None
        with self._db.tx() as tx:
            tx.execute(
                "UPDATE images SET last_used_at = ? WHERE bundle_digest = ?",
                (time.time(), bundle_digest),
            )
        return ImageRef(
            registry_ref=row["registry_ref"],
            image_digest=row["image_digest"],
            built_at=row["built_at"],
            source_bundle_digest=row["bundle_digest"],
        )

    def build_image(self, bundle: Bundle, recipe: ImageRecipe) -> ImageRef:
        self.builds_started += 1
        img_dir = os.path.join(self._cache, "tmp", f"bld-{uuid4().hex}")
        try:
            base = self._base_rootfs(recipe.base_image_ref)
            copy_rootfs(base, img_dir)
            extract_tree(bundle.data_tree.path, img_dir)

            layer_path = os.path.join(self._cache, "tmp", f"layer-{uuid4().hex}")
            try:
                with open(layer_path, "wb") as f:
                    writer = _HashingWriter(f)
                    pack_layer(img_dir, writer)
                layer_digest = f"sha256:{writer.hexdigest()}"
                layer_size = os.path.getsize(layer_path)

                config = _canonical_json(
                    {
                        "architecture": "amd64",
                        "os": "linux",
                        "config": {
                            "Env": sorted(f"{k}={v}" for k, v in recipe.env.items()),
                            "Labels": dict(sorted(recipe.label_set.items())),
                            "WorkingDir": recipe.default_workdir,
                        },
                        "rootfs": {"type": "layers", "diff_ids": [layer_digest]},
                    }
                )
                manifest = _canonical_json(
                    {
                        "schemaVersion": 2,
                        "mediaType": MANIFEST_TYPE,
                        "config": {
                            "mediaType": CONFIG_TYPE,
                            "digest": digest_of(config),
                            "size": len(config),
                        },
                        "layers": [
                            {
                                "mediaType": LAYER_TYPE,
                                "digest": layer_digest,
                                "size": layer_size,
                            }
                        ],
                    }
                )
                image_digest = digest_of(manifest)

                with open(layer_path, "rb") as f:
                    self._registry.push_blob(layer_digest, f)
                self._registry.push_blob(digest_of(config), io.BytesIO(config))
                self._registry.push_manifest(image_digest, manifest)
                self._registry.push_manifest(
                    f"b-{bundle.content_digest}", manifest
                )
            finally:
                _unlink_quiet(layer_path)

            ref = ImageRef(
                registry_ref=f"{self._registry.repo}@{image_digest}",
                image_digest=image_digest,
                built_at=time.time(),
                source_bundle_digest=bundle.content_digest,
            )
            now = time.time()
            with self._db.tx(immediate=True) as tx:
                tx.execute(
                    "INSERT OR REPLACE INTO images "
                    "(bundle_digest, image_digest, registry_ref, built_at,"
                    " last_used_at, size_bytes) VALUES (?, ?, ?, ?, ?, ?)",
                    (
                        bundle.content_digest,
                        image_digest,
                        ref.registry_ref,
                        ref.built_at,
                        now,
                        _tree_size(img_dir),
                    ),
                )
            self._install_rootfs(img_dir, image_digest)
            img_dir = None  # consumed by the install
            self.evict_as_needed()
            return ref
        finally:
            if img_dir is not None:
                shutil.rmtree(img_dir, ignore_errors=True)

    def materialize(self, ref: ImageRef) -> str:
        dest = self._rootfs_dir(ref.image_digest)
        if os.path.isdir(dest):
            return dest
        manifest_bytes = self._registry.pull_manifest(ref.image_digest)
        if manifest_bytes is None:
            raise ImageMissing(f"registry no longer holds {ref.image_digest}")
        manifest = json.loads(manifest_bytes)
        layer_digest = manifest["layers"][0]["digest"]
        tmp = os.path.join(self._cache, "tmp", f"mat-{uuid4().hex}")
        spool = os.path.join(self._cache, "tmp", f"pull-{uuid4().hex}")
        try:
            with open(spool, "wb") as f:
                if not self._registry.pull_blob(layer_digest, f):
                    raise ImageMissing(f"registry lost layer {layer_digest}")
            with open(spool, "rb") as f:
                extract_layer(f, tmp)
            try:
                os.rename(tmp, dest)
            except OSError:
                if not os.path.isdir(dest):  # lost a benign materialize race
                    raise
                shutil.rmtree(tmp, ignore_errors=True)
        finally:
            _unlink_quiet(spool)
            if os.path.isdir(tmp) and not os.path.isdir(dest):
                shutil.rmtree(tmp, ignore_errors=True)
        self.evict_as_needed()
        return dest

    def evict_as_needed(self) -> None:
        """Drop least-recently-used local rootfs dirs above the size bound.

        The registry copy stays, so an evicted image can always be pulled
        back; protected bundles (queued or running jobs) are never evicted.
        """
        if self._cache_limit is None:
            return
        root = os.path.join(self._cache, "rootfs")
        conn = self._db.connect()
        rows = conn.execute(
            "SELECT bundle_digest, image_digest, last_used_at, size_bytes FROM images"
        ).fetchall()
        by_hex = {r["image_digest"].split(":", 1)[1]: r for r in rows}
        candidates = []  # (last_used, bundle_digest or None, dir)
        total = 0
        for name in os.listdir(root):
            path = os.path.join(root, name)
            if not os.path.isdir(path):
                continue
            row = by_hex.get(name)
            size = row["size_bytes"] if row else _tree_size(path)
            total += size
            candidates.append(
                (
                    row["last_used_at"] if row else 0.0,
                    row["bundle_digest"] if row else None,
                    path,
                    size,
                )
            )
        if total <= self._cache_limit:
            return
        protected = self._protected()
        for last_used, bundle_digest, path, size in sorted(candidates):
            if total <= self._cache_limit:
                break
            if bundle_digest is not None and bundle_digest in protected:
                continue
            log.info("evicting cached image rootfs %s", os.path.basename(path))
            shutil.rmtree(path, ignore_errors=True)
            total -= size

    # -- internals ----------------------------------------------------------

    def _ensure(self, bundle: Bundle) -> tuple[ImageRef, str]:
        ref = self.lookup_cached(bundle.content_digest)
        if ref is not None:
            try:
                return ref, self.materialize(ref)
            except ImageMissing:
                with self._db.tx(immediate=True) as tx:
                    tx.execute(
                        "DELETE FROM images WHERE bundle_digest = ?",
                        (bundle.content_digest,),
                    )
        recipe = derive_recipe(
            bundle.manifest,
            content_digest=bundle.content_digest,
            table=self._base_table,
        )
        ref = self.build_image(bundle, recipe)
        return ref, self._rootfs_dir(ref.image_digest)

    def _rootfs_dir(self, image_digest: str) -> str:
        return os.path.join(self._cache, "rootfs", image_digest.split(":", 1)[1])

    def _install_rootfs(self, tmp_dir: str, image_digest: str) -> None:
        dest = self._rootfs_dir(image_digest)
        try:
            os.rename(tmp_dir, dest)
        except OSError:
            if os.path.isdir(dest):  # an equal image is already in place
                shutil.rmtree(tmp_dir, ignore_errors=True)
            else:
                raise

    def _base_rootfs(self, base_ref: str) -> str:
        slug = base_ref.replace("/", "_").replace(":", "-")
        dest = os.path.join(self._cache, "bases", slug)
        if os.path.isdir(dest):
            return dest
        with self._base_lock:
            if os.path.isdir(dest):
                return dest
            tmp = os.path.join(self._cache, "tmp", f"base-{uuid4().hex}")
            try:
                self._provisioner(tmp)
            except Exception as exc:
                shutil.rmtree(tmp, ignore_errors=True)
                raise BaseImagePullFailed(
                    f"cannot provision base image {base_ref!r}: {exc}"
                ) from exc
            try:
                os.rename(tmp, dest)
            except OSError:
                if not os.path.isdir(dest):
                    shutil.rmtree(tmp, ignore_errors=True)
                    raise
                shutil.rmtree(tmp, ignore_errors=True)
            return dest


class _HashingWriter:
    def __init__(self, raw):
        self._raw = raw
        self._hash = hashlib.sha256()

    def write(self, data: bytes) -> int:
        self._hash.update(data)
        return self._raw.write(data)

    def hexdigest(self) -> str:
        return self._hash.hexdigest()


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _tree_size(root: str) -> int:
    total = 0
    for dirpath, _dirnames, filenames in os.walk(root):
        for name in filenames:
            try:
                total += os.lstat(os.path.join(dirpath, name)).st_size
            except OSError:
                pass
    return total


def _unlink_quiet(path: str) -> None:
    try:
        os.unlink(path)
    except OSError:
        pass
