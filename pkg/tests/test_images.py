"""Image recipes, deterministic layers, the registry client, and the cache."""

from __future__ import annotations

import dataclasses
import io
import json
import os
import shutil
import tarfile
import threading

import pytest

import fixtures
from bundlerun.backend.rootfs import copy_rootfs, provision_base_rootfs
from bundlerun.bundle.manifest import OsInfo
from bundlerun.bundle.reader import parse_bundle
from bundlerun.db import Database
from bundlerun.errors import (
    DigestMismatch,
    MalformedDataTree,
    PathTraversal,
    RegistryUnavailable,
    UnsupportedArchitecture,
)
from bundlerun.images import (
    DIGEST_LABEL,
    FALLBACK_WARNING_LABEL,
    ImageStore,
    derive_recipe,
    load_base_table,
)
from bundlerun.images.devregistry import DevRegistry
from bundlerun.images.layer import extract_layer, pack_layer
from bundlerun.images.registry import RegistryClient, digest_of


def _with_os(manifest, distribution, version, arch="x86_64"):
    return dataclasses.replace(
        manifest,
        os_info=OsInfo(
            distribution=distribution, distro_version=version, architecture=arch
        ),
    )


class TestDeriveRecipe:
    def test_known_os_maps_to_pinned_base(self):
        m = _with_os(fixtures.hello_manifest(), "ubuntu", "16.04")
        recipe = derive_recipe(m)
        assert recipe.base_image_ref == "ubuntu:16.04"
        assert FALLBACK_WARNING_LABEL not in recipe.label_set

    def test_unknown_os_uses_fallback_and_warns(self):
        m = _with_os(fixtures.hello_manifest(), "slackware", "1.0")
        recipe = derive_recipe(m)
        assert recipe.base_image_ref == load_base_table().fallback_ref
        assert recipe.label_set[FALLBACK_WARNING_LABEL] == "slackware/1.0"

    def test_unsupported_architecture_rejected(self):
        m = _with_os(fixtures.hello_manifest(), "ubuntu", "22.04", arch="sparc64")
        with pytest.raises(UnsupportedArchitecture):
            derive_recipe(m)

    def test_environment_and_workdir_projected(self):
        m = fixtures.hello_manifest()
        run = dataclasses.replace(m.runs[0], working_dir="/work")
        m = dataclasses.replace(m, runs=(run,))
        recipe = derive_recipe(m)
        assert recipe.env == {"GREETING": "hello"}
        assert recipe.default_workdir == "/work"

    def test_content_digest_stamped_as_label(self):
        digest = "a" * 64
        recipe = derive_recipe(fixtures.hello_manifest(), content_digest=digest)
        assert recipe.label_set[DIGEST_LABEL] == digest

    def test_derivation_is_pure(self):
        a = derive_recipe(fixtures.pipeline_manifest(), content_digest="b" * 64)
        b = derive_recipe(fixtures.pipeline_manifest(), content_digest="b" * 64)
        assert a == b


def _populate(root) -> None:
    (root / "etc").mkdir()
    (root / "etc" / "motd").write_bytes(b"welcome\n")
    (root / "bin").mkdir()
    script = root / "bin" / "tool"
    script.write_bytes(b"#!/bin/sh\nexit 0\n")
    script.chmod(0o755)
    os.symlink("/etc/motd", root / "motd-abs")
    os.symlink("etc/motd", root / "motd-rel")
    os.mkfifo(root / "pipe")


class TestLayerArchive:
    def test_round_trip(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        _populate(src)
        buf = io.BytesIO()
        pack_layer(str(src), buf)
        buf.seek(0)
        dest = tmp_path / "dest"
        extract_layer(buf, str(dest))
        assert (dest / "etc" / "motd").read_bytes() == b"welcome\n"
        assert os.readlink(dest / "motd-abs") == "/etc/motd"
        assert os.readlink(dest / "motd-rel") == "etc/motd"
        assert (dest / "bin" / "tool").stat().st_mode & 0o777 == 0o755
        import stat

        assert stat.S_ISFIFO(os.lstat(dest / "pipe").st_mode)

    def test_equal_trees_pack_to_equal_bytes(self, tmp_path):
        first, second = tmp_path / "one", tmp_path / "two"
        for root in (first, second):
            root.mkdir()
            _populate(root)
        a, b = io.BytesIO(), io.BytesIO()
        pack_layer(str(first), a)
        pack_layer(str(second), b)
        assert a.getvalue() == b.getvalue()

    def test_truncated_layer_rejected(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        _populate(src)
        buf = io.BytesIO()
        pack_layer(str(src), buf)
        cut = io.BytesIO(buf.getvalue()[: buf.tell() // 2])
        with pytest.raises(MalformedDataTree):
            extract_layer(cut, str(tmp_path / "dest"))

    def test_garbage_rejected(self, tmp_path):
        with pytest.raises(MalformedDataTree):
            extract_layer(io.BytesIO(b"not even gzip"), str(tmp_path / "dest"))

    def test_parent_escape_entry_rejected(self, tmp_path):
        raw = io.BytesIO()
        import gzip

        with gzip.GzipFile(fileobj=raw, mode="wb") as gz:
            with tarfile.open(fileobj=gz, mode="w") as tar:
                info = tarfile.TarInfo(name="../evil")
                info.size = 4
                tar.addfile(info, io.BytesIO(b"boom"))
        raw.seek(0)
        with pytest.raises(PathTraversal):
            extract_layer(raw, str(tmp_path / "dest"))
        assert not (tmp_path / "evil").exists()


@pytest.fixture()
def registry():
    with DevRegistry() as reg:
        yield reg


@pytest.fixture()
def client(registry):
    return RegistryClient(registry.endpoint)


class TestRegistryClient:
    def test_ping(self, client):
        assert client.ping()

    def test_blob_round_trip(self, client, tmp_path):
        payload = b"layer bytes" * 1000
        digest = digest_of(payload)
        assert not client.blob_exists(digest)
        client.push_blob(digest, io.BytesIO(payload))
        assert client.blob_exists(digest)
        out = io.BytesIO()
        assert client.pull_blob(digest, out)
        assert out.getvalue() == payload

    def test_pull_missing_blob(self, client):
        assert not client.pull_blob(digest_of(b"nothing"), io.BytesIO())

    def test_corrupted_blob_detected(self, client, registry):
        payload = b"trust but verify"
        digest = digest_of(payload)
        client.push_blob(digest, io.BytesIO(payload))
        with registry.state.lock:
            registry.state.blobs[digest] = b"tampered"
        with pytest.raises(DigestMismatch):
            client.pull_blob(digest, io.BytesIO())

    def test_manifest_by_digest_and_tag(self, client):
        manifest = json.dumps({"schemaVersion": 2}).encode()
        digest = client.push_manifest("some-tag", manifest)
        assert digest == digest_of(manifest)
        assert client.pull_manifest(digest) == manifest
        assert client.pull_manifest("some-tag") == manifest
        assert client.manifest_exists(digest)
        client.delete_manifest(digest)
        assert client.pull_manifest(digest) is None
        assert client.pull_manifest("some-tag") is None

    def test_missing_manifest_returns_none(self, client):
        assert client.pull_manifest("sha256:" + "0" * 64) is None
        assert not client.manifest_exists("no-such-tag")

    def test_server_errors_become_typed(self, client, registry):
        registry.fail_next(10)
        with pytest.raises(RegistryUnavailable):
            client.push_manifest("t", b"{}")


needs_root = pytest.mark.skipif(os.geteuid() != 0, reason="requires root")


@pytest.fixture(scope="module")
def shared_base(tmp_path_factory):
    path = tmp_path_factory.mktemp("base") / "rootfs"
    provision_base_rootfs(str(path))
    return str(path)


@pytest.fixture()
def make_store(tmp_path, registry, shared_base):
    counter = iter(range(100))

    def factory(**kwargs):
        n = next(counter)
        db = Database(str(tmp_path / f"store{n}.sqlite"))
        return ImageStore(
            db,
            RegistryClient(registry.endpoint),
            str(tmp_path / f"cache{n}"),
            provisioner=lambda dest: copy_rootfs(shared_base, dest),
            **kwargs,
        )

    return factory


def _bundle(raw: bytes):
    return parse_bundle(io.BytesIO(raw))


@needs_root
class TestImageStore:
    def test_build_then_cache_hit(self, make_store):
        store = make_store()
        raw = fixtures.hello_bundle_bytes()
        ref1, root1 = store.ensure_image(_bundle(raw))
        ref2, root2 = store.ensure_image(_bundle(raw))
        assert store.builds_started == 1
        assert ref1.image_digest == ref2.image_digest
        assert root1 == root2 and os.path.isdir(root1)

    def test_rebuilds_are_digest_identical(self, make_store):
        raw = fixtures.transform_bundle_bytes()
        ref_a, _ = make_store().ensure_image(_bundle(raw))
        ref_b, _ = make_store().ensure_image(_bundle(raw))
        assert ref_a.image_digest == ref_b.image_digest

    def test_different_content_different_digest(self, make_store):
        store = make_store()
        ref_a, _ = store.ensure_image(_bundle(fixtures.transform_bundle_bytes(b"one\n")))
        ref_b, _ = store.ensure_image(_bundle(fixtures.transform_bundle_bytes(b"two\n")))
        assert ref_a.image_digest != ref_b.image_digest

    def test_bundle_tree_lands_in_image(self, make_store):
        store = make_store()
        payload = b"lower case text\n"
        _, root = store.ensure_image(_bundle(fixtures.transform_bundle_bytes(payload)))
        with open(os.path.join(root, "in/data.txt"), "rb") as f:
            assert f.read() == payload
        assert os.path.isdir(os.path.join(root, "out"))
        assert os.path.exists(os.path.join(root, "usr/bin/sh"))

    def test_manifest_and_config_round_trip(self, make_store, registry):
        store = make_store()
        raw = fixtures.hello_bundle_bytes()
        bundle = _bundle(raw)
        ref, _ = store.ensure_image(bundle)
        client = RegistryClient(registry.endpoint)
        manifest_bytes = client.pull_manifest(f"b-{bundle.content_digest}")
        assert manifest_bytes is not None
        assert digest_of(manifest_bytes) == ref.image_digest
        manifest = json.loads(manifest_bytes)
        out = io.BytesIO()
        assert client.pull_blob(manifest["config"]["digest"], out)
        config = json.loads(out.getvalue())
        assert config["config"]["Labels"][DIGEST_LABEL] == bundle.content_digest
        assert config["config"]["Env"] == ["GREETING=hello"]
        assert config["config"]["WorkingDir"] == "/"

    def test_corrupt_tree_fails_build_with_no_cache_entry(self, make_store, registry):
        store = make_store()
        bundle = _bundle(fixtures.transform_bundle_bytes())
        with open(bundle.data_tree.path, "r+b") as f:
            f.truncate(bundle.data_tree.size_bytes // 2)
        with pytest.raises(MalformedDataTree):
            store.ensure_image(bundle)
        assert store.lookup_cached(bundle.content_digest) is None
        client = RegistryClient(registry.endpoint)
        assert client.pull_manifest(f"b-{bundle.content_digest}") is None

    def test_registry_down_leaves_no_partial_entry(self, make_store, registry):
        store = make_store()
        bundle = _bundle(fixtures.hello_bundle_bytes())
        registry.fail_next(100)
        with pytest.raises(RegistryUnavailable):
            store.ensure_image(bundle)
        registry.fail_next(0)
        assert store.lookup_cached(bundle.content_digest) is None
        tmp_dir = os.path.join(store._cache, "tmp")
        assert os.listdir(tmp_dir) == []

    def test_stale_row_repaired_on_lookup(self, make_store, registry):
        store = make_store()
        bundle = _bundle(fixtures.hello_bundle_bytes())
        ref, _ = store.ensure_image(bundle)
        assert store.lookup_cached(bundle.content_digest) is not None
        RegistryClient(registry.endpoint).delete_manifest(ref.image_digest)
        assert store.lookup_cached(bundle.content_digest) is None
        conn = store._db.connect()
        row = conn.execute("SELECT * FROM images").fetchone()
        assert row is None

    def test_lost_layer_blob_triggers_one_rebuild(self, make_store, registry):
        store = make_store()
        raw = fixtures.hello_bundle_bytes()
        ref, root = store.ensure_image(_bundle(raw))
        client = RegistryClient(registry.endpoint)
        manifest = json.loads(client.pull_manifest(ref.image_digest))
        client.delete_blob(manifest["layers"][0]["digest"])
        shutil.rmtree(root)
        ref2, root2 = store.ensure_image(_bundle(raw))
        assert store.builds_started == 2
        assert ref2.image_digest == ref.image_digest
        assert os.path.isdir(root2)

    def test_evicted_rootfs_restored_from_registry(self, make_store):
        store = make_store()
        raw = fixtures.hello_bundle_bytes()
        ref, root = store.ensure_image(_bundle(raw))
        shutil.rmtree(root)
        ref2, root2 = store.ensure_image(_bundle(raw))
        assert store.builds_started == 1
        assert os.path.isdir(root2)
        assert ref2.image_digest == ref.image_digest

    def test_concurrent_requests_build_once(self, make_store):
        store = make_store()
        raw = fixtures.pipeline_bundle_bytes()
        barrier = threading.Barrier(8)
        results, errors = [], []

        def work():
            bundle = _bundle(raw)
            barrier.wait()
            try:
                results.append(store.ensure_image(bundle))
            except BaseException as exc:  # surfaced below
                errors.append(exc)

        threads = [threading.Thread(target=work) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=120)
        assert errors == []
        assert len(results) == 8
        assert store.builds_started == 1
        assert len({ref.image_digest for ref, _ in results}) == 1
        assert len({root for _, root in results}) == 1

    def test_lru_eviction_and_protection(self, make_store):
        protected: set[str] = set()
        store = make_store(protected_digests=lambda: protected)
        bundles = {
            name: fixtures.transform_bundle_bytes(f"payload {name}\n".encode())
            for name in ("a", "b", "c")
        }
        ref_a, root_a = store.ensure_image(_bundle(bundles["a"]))
        ref_b, root_b = store.ensure_image(_bundle(bundles["b"]))
        size = store._db.connect().execute(
            "SELECT size_bytes FROM images LIMIT 1"
        ).fetchone()["size_bytes"]
        store._cache_limit = int(2.5 * size)
        # touch a so b is the least recently used
        store.ensure_image(_bundle(bundles["a"]))
        ref_c, root_c = store.ensure_image(_bundle(bundles["c"]))
        assert os.path.isdir(root_a)
        assert not os.path.isdir(root_b)
        assert os.path.isdir(root_c)
        # a protected bundle's image must survive even as the LRU victim
        digest_a = _bundle(bundles["a"]).content_digest
        protected.add(digest_a)
        store.ensure_image(_bundle(bundles["b"]))  # re-pull b; now over limit
        assert os.path.isdir(root_a)
        builds_before = store.builds_started
        store.ensure_image(_bundle(bundles["a"]))
        assert store.builds_started == builds_before
