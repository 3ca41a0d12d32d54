"""SigV4 S3 client for the object-store contract.

Path-style addressing against any compatible endpoint. Uploads above the
multipart threshold go through the multipart protocol; transient errors
retry with exponential backoff before surfacing StoreUnavailable.
"""

from __future__ import annotations

import hashlib
import logging
import time
import xml.etree.ElementTree as ET
from typing import BinaryIO, Iterator
from urllib.parse import quote, urlsplit

import httpx

from bundlerun.errors import StoreUnavailable, TtlExceedsPolicy, UnknownObject
from bundlerun.storage import (
    ArtifactRef,
    CappedReader,
    ObjectStore,
    check_key,
    make_key,
    verified_stream,
)

log = logging.getLogger(__name__)

MULTIPART_THRESHOLD = 8 * 1024 * 1024
PART_SIZE = 8 * 1024 * 1024
RETRY_ATTEMPTS = 3
RETRY_BASE_DELAY = 0.2


def _amz_now() -> str:
    return time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())


def _read_full(reader: CappedReader, n: int) -> bytes:
    # read(n) may legally short-read; middle multipart parts must be full-size
    pieces = []
    remaining = n
    while remaining > 0:
        chunk = reader.read(remaining)
        if not chunk:
            break
        pieces.append(chunk)
        remaining -= len(chunk)
    return b"".join(pieces)


class S3Store(ObjectStore):
    def __init__(
        self,
        *,
        endpoint: str,
        bucket: str,
        access_key: str,
        secret_key: str,
        region: str = "us-east-1",
        max_presign_ttl: int = 7 * 24 * 3600,
        timeout: float = 30.0,
    ):
        parts = urlsplit(endpoint)
        self.scheme = parts.scheme or "http"
        self.host = parts.netloc
        self.bucket = bucket
        self.access_key = access_key
        self.secret_key = secret_key
        self.region = region
        self.max_presign_ttl = max_presign_ttl
        self._client = httpx.Client(timeout=timeout)

    def _uri(self, key: str) -> str:
        return f"/{self.bucket}/{key}"

    def _request(
        self,
        method: str,
        key: str,
        *,
        query: dict[str, str] | None = None,
        body: bytes = b"",
        retryable: bool = True,
    ) -> httpx.Response:
        from bundlerun.storage import sigv4

        query = query or {}
        payload_hash = hashlib.sha256(body).hexdigest()
        uri = self._uri(key)
        last_error: Exception | None = None
        for attempt in range(RETRY_ATTEMPTS):
            amz_date = _amz_now()
            headers = {
                "x-amz-date": amz_date,
                "x-amz-content-sha256": payload_hash,
            }
            auth = sigv4.sign_headers(
                method=method,
                host=self.host,
                uri=uri,
                query=query,
                headers=headers,
                payload_sha256=payload_hash,
                access_key=self.access_key,
                secret_key=self.secret_key,
                region=self.region,
                amz_date=amz_date,
            )
            url = f"{self.scheme}://{self.host}{quote(uri, safe='/._-$')}"
            try:
                response = self._client.request(
                    method, url, params=query, content=body,
                    headers={**headers, "Authorization": auth},
                )
            except httpx.HTTPError as exc:
                last_error = exc
            else:
                if response.status_code < 500:
                    return response
                last_error = StoreUnavailable(
                    f"{method} {key}: store returned {response.status_code}"
                )
            if not retryable:
                break
            time.sleep(RETRY_BASE_DELAY * (2 ** attempt))
        raise StoreUnavailable(f"{method} {key} failed after retries: {last_error}")

    def put_artifact(
        self,
        namespace: str,
        logical_name: str,
        stream: BinaryIO,
        *,
        content_type: str = "application/octet-stream",
        size_cap: int | None = None,
    ) -> ArtifactRef:
        key = make_key(namespace, logical_name)
        reader = CappedReader(stream, size_cap)
        h = hashlib.sha256()

        first = _read_full(reader, MULTIPART_THRESHOLD + 1)
        if len(first) <= MULTIPART_THRESHOLD:
            h.update(first)
            response = self._request("PUT", key, body=first)
            if response.status_code not in (200, 201):
                raise StoreUnavailable(f"PUT {key}: status {response.status_code}")
            return ArtifactRef(self.bucket, key, len(first), h.hexdigest(), content_type)
        return self._put_multipart(key, first, reader, h, content_type)

    def _put_multipart(
        self, key: str, first: bytes, reader: CappedReader, h, content_type: str
    ) -> ArtifactRef:
        response = self._request("POST", key, query={"uploads": ""})
        if response.status_code != 200:
            raise StoreUnavailable(f"multipart initiate {key}: {response.status_code}")
        upload_id = _xml_text(response.content, "UploadId")
        etags: list[str] = []
        size = 0
        buffer = first
        part_number = 1
        try:
            while buffer:
                part, buffer = buffer[:PART_SIZE], buffer[PART_SIZE:]
                if len(part) < PART_SIZE:
                    part += _read_full(reader, PART_SIZE - len(part))
                h.update(part)
                size += len(part)
                response = self._request(
                    "PUT",
                    key,
                    query={"partNumber": str(part_number), "uploadId": upload_id},
                    body=part,
                )
                if response.status_code != 200:
                    raise StoreUnavailable(
                        f"part {part_number} of {key}: {response.status_code}"
                    )
                etags.append(response.headers.get("ETag", '""').strip('"'))
                part_number += 1
                if not buffer:
                    buffer = _read_full(reader, PART_SIZE)
            complete = ET.Element("CompleteMultipartUpload")
            for i, etag in enumerate(etags, start=1):
                part_el = ET.SubElement(complete, "Part")
                ET.SubElement(part_el, "PartNumber").text = str(i)
                ET.SubElement(part_el, "ETag").text = etag
            response = self._request(
                "POST", key, query={"uploadId": upload_id}, body=ET.tostring(complete)
            )
            if response.status_code != 200:
                raise StoreUnavailable(f"multipart complete {key}: {response.status_code}")
        except BaseException:
            try:
                self._request(
                    "DELETE", key, query={"uploadId": upload_id}, retryable=False
                )
            except StoreUnavailable:
                log.warning("could not abort multipart upload for %s", key)
            raise
        return ArtifactRef(self.bucket, key, size, h.hexdigest(), content_type)

    def get_artifact(self, ref: ArtifactRef) -> Iterator[bytes]:
        response = self._request("GET", ref.key)
        if response.status_code == 404:
            raise UnknownObject(f"no object at {ref.key!r}")
        if response.status_code != 200:
            raise StoreUnavailable(f"GET {ref.key}: status {response.status_code}")

        def chunks() -> Iterator[bytes]:
            yield response.content

        return verified_stream(chunks(), ref)

    def presign_download(self, ref: ArtifactRef, ttl_seconds: int) -> str:
        from bundlerun.storage import sigv4

        if ttl_seconds > self.max_presign_ttl:
            raise TtlExceedsPolicy(
                f"ttl {ttl_seconds}s exceeds the {self.max_presign_ttl}s maximum"
            )
        if not self.exists(ref.key):
            raise UnknownObject(f"no object at {ref.key!r}")
        return sigv4.presign_url(
            method="GET",
            scheme=self.scheme,
            host=self.host,
            uri=self._uri(ref.key),
            expires_seconds=ttl_seconds,
            access_key=self.access_key,
            secret_key=self.secret_key,
            region=self.region,
            amz_date=_amz_now(),
        )

    def exists(self, key: str) -> bool:
        response = self._request("HEAD", check_key(key))
        return response.status_code == 200

    def delete(self, key: str) -> None:
        self._request("DELETE", check_key(key))


def _xml_text(data: bytes, tag: str) -> str:
    root = ET.fromstring(data)
    namespace = root.tag.partition("}")[0] + "}" if root.tag.startswith("{") else ""
    element = root.find(f".//{namespace}{tag}")
    if element is None or element.text is None:
        raise StoreUnavailable(f"store response lacks <{tag}>")
    return element.text
