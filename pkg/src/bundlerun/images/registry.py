"""HTTP client for a container registry (distribution API subset).

Speaks the few endpoints the image cache needs: ping, blob push/pull/head,
manifest push/pull/head/delete. Blobs push monolithically. Connection
errors and 5xx map to RegistryUnavailable; pulled content is digest-checked.
"""

from __future__ import annotations

import hashlib
import os
from typing import BinaryIO

import httpx

from bundlerun.errors import DigestMismatch, RegistryUnavailable

MANIFEST_TYPE = "application/vnd.oci.image.manifest.v1+json"
_CHUNK = 1024 * 1024


def digest_of(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


class RegistryClient:
    def __init__(self, endpoint: str, repo: str = "bundles", *, timeout: float = 60.0):
        self.endpoint = endpoint.rstrip("/")
        self.repo = repo
        self._client = httpx.Client(timeout=timeout)

    def _url(self, tail: str) -> str:
        return f"{self.endpoint}/v2/{self.repo}/{tail}"

    def _request(self, method: str, url: str, **kw) -> httpx.Response:
        try:
            response = self._client.request(method, url, **kw)
        except httpx.HTTPError as exc:
            raise RegistryUnavailable(f"registry unreachable: {exc}") from exc
        if response.status_code >= 500:
            raise RegistryUnavailable(
                f"registry error {response.status_code} on {method} {url}"
            )
        return response

    def ping(self) -> bool:
        try:
            return self._request("GET", f"{self.endpoint}/v2/").status_code == 200
        except RegistryUnavailable:
            return False

    def blob_exists(self, digest: str) -> bool:
        response = self._request("HEAD", self._url(f"blobs/{digest}"))
        return response.status_code == 200

    def push_blob(self, digest: str, stream: BinaryIO) -> None:
        if self.blob_exists(digest):
            return
        # explicit length keeps httpx off chunked transfer-encoding, which
        # plain HTTP/1.0-era registries reject; blob sources are seekable
        size = stream.seek(0, os.SEEK_END)
        stream.seek(0)
        response = self._request(
            "POST",
            self._url("blobs/uploads/"),
            params={"digest": digest},
            content=_iter_stream(stream),
            headers={
                "Content-Type": "application/octet-stream",
                "Content-Length": str(size),
            },
        )
        if response.status_code not in (201, 202):
            raise RegistryUnavailable(
                f"blob upload rejected with {response.status_code}: {response.text}"
            )

    def pull_blob(self, digest: str, out: BinaryIO) -> bool:
        response = self._request("GET", self._url(f"blobs/{digest}"))
        if response.status_code == 404:
            return False
        if response.status_code != 200:
            raise RegistryUnavailable(f"blob pull got {response.status_code}")
        h = hashlib.sha256()
        for chunk in response.iter_bytes(_CHUNK):
            h.update(chunk)
            out.write(chunk)
        if f"sha256:{h.hexdigest()}" != digest:
            raise DigestMismatch(f"registry returned wrong bytes for {digest}")
        return True

    def push_manifest(self, reference: str, manifest: bytes) -> str:
        response = self._request(
            "PUT",
            self._url(f"manifests/{reference}"),
            content=manifest,
            headers={"Content-Type": MANIFEST_TYPE},
        )
        if response.status_code != 201:
            raise RegistryUnavailable(
                f"manifest push rejected with {response.status_code}: {response.text}"
            )
        return digest_of(manifest)

    def pull_manifest(self, reference: str) -> bytes | None:
        response = self._request(
            "GET",
            self._url(f"manifests/{reference}"),
            headers={"Accept": MANIFEST_TYPE},
        )
        if response.status_code == 404:
            return None
        if response.status_code != 200:
            raise RegistryUnavailable(f"manifest pull got {response.status_code}")
        body = response.content
        if reference.startswith("sha256:") and digest_of(body) != reference:
            raise DigestMismatch(f"registry returned wrong manifest for {reference}")
        return body

    def manifest_exists(self, reference: str) -> bool:
        response = self._request(
            "HEAD", self._url(f"manifests/{reference}"), headers={"Accept": MANIFEST_TYPE}
        )
        return response.status_code == 200

    def delete_manifest(self, reference: str) -> None:
        self._request("DELETE", self._url(f"manifests/{reference}"))

    def delete_blob(self, digest: str) -> None:
        self._request("DELETE", self._url(f"blobs/{digest}"))


def _iter_stream(stream: BinaryIO):
    while True:
        chunk = stream.read(_CHUNK)
        if not chunk:
            return
        yield chunk
