"""In-memory S3-compatible server for tests and local development.

Speaks just enough of the protocol for S3Store: path-style object
PUT/GET/HEAD/DELETE, multipart upload, header-signed and query-presigned
authentication. Signatures are actually verified — a bad or expired
signature gets 403, same as the real thing.
"""

from __future__ import annotations

import hashlib
import threading
import time
import xml.etree.ElementTree as ET
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qsl, unquote, urlsplit
from uuid import uuid4

from bundlerun.storage import sigv4


class _State:
    def __init__(self, bucket: str, access_key: str, secret_key: str):
        self.bucket = bucket
        self.access_key = access_key
        self.secret_key = secret_key
        self.objects: dict[str, bytes] = {}
        self.uploads: dict[str, dict[int, bytes]] = {}
        self.upload_keys: dict[str, str] = {}
        self.fail_remaining = 0
        self.request_count = 0
        self.lock = threading.Lock()


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    state: _State  # set by make_server

    def log_message(self, fmt, *args):  # keep test output quiet
        pass

    def _send(self, status: int, body: bytes = b"", content_type: str = "application/xml"):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(body)

    def _error(self, status: int, code: str, message: str):
        body = (
            f"<?xml version='1.0'?><Error><Code>{code}</Code>"
            f"<Message>{message}</Message></Error>"
        ).encode()
        self._send(status, body)

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _key(self, path: str) -> str | None:
        decoded = unquote(path)
        prefix = f"/{self.state.bucket}/"
        if not decoded.startswith(prefix):
            return None
        return decoded[len(prefix):]

    def _authorized(self, query: dict[str, str], body: bytes) -> tuple[bool, str]:
        decoded_uri = unquote(urlsplit(self.path).path)
        host = self.headers.get("Host", "")
        if "X-Amz-Algorithm" in query:
            ok, reason = sigv4.verify_presigned_query(
                method=self.command,
                host=host,
                uri=decoded_uri,
                query=query,
                secret_key=self.state.secret_key,
                now_epoch=time.time(),
            )
            return ok, reason
        auth = self.headers.get("Authorization", "")
        if not auth.startswith(sigv4.ALGORITHM):
            return False, "missing authorization"
        fields = dict(
            part.strip().split("=", 1)
            for part in auth[len(sigv4.ALGORITHM):].split(",")
        )
        credential = fields.get("Credential", "")
        access_key, _, scope = credential.partition("/")
        if access_key != self.state.access_key:
            return False, "unknown access key"
        region = scope.split("/")[1] if scope.count("/") >= 3 else ""
        signed_names = fields.get("SignedHeaders", "").split(";")
        amz_date = self.headers.get("x-amz-date", "")
        payload_hash = self.headers.get(
            "x-amz-content-sha256", hashlib.sha256(body).hexdigest()
        )
        headers = {
            name: self.headers.get(name, "")
            for name in signed_names
            if name != "host"
        }
        expected = sigv4.sign_headers(
            method=self.command,
            host=host,
            uri=decoded_uri,
            query=query,
            headers=headers,
            payload_sha256=payload_hash,
            access_key=access_key,
            secret_key=self.state.secret_key,
            region=region,
            amz_date=amz_date,
        )
        if expected != auth:
            return False, "signature mismatch"
        if payload_hash not in (sigv4.UNSIGNED_PAYLOAD,):
            if hashlib.sha256(body).hexdigest() != payload_hash:
                return False, "payload hash mismatch"
        return True, ""

    def _handle(self):
        state = self.state
        parts = urlsplit(self.path)
        query = dict(parse_qsl(parts.query, keep_blank_values=True))
        body = self._read_body()
        with state.lock:
            state.request_count += 1
            if state.fail_remaining > 0:
                state.fail_remaining -= 1
                self._error(503, "SlowDown", "injected failure")
                return
        ok, reason = self._authorized(query, body)
        if not ok:
            self._error(403, "AccessDenied", reason)
            return
        key = self._key(parts.path)
        if key is None:
            self._error(404, "NoSuchBucket", "bucket mismatch")
            return

        if self.command == "POST" and "uploads" in query:
            upload_id = uuid4().hex
            with state.lock:
                state.uploads[upload_id] = {}
                state.upload_keys[upload_id] = key
            root = ET.Element("InitiateMultipartUploadResult")
            ET.SubElement(root, "Bucket").text = state.bucket
            ET.SubElement(root, "Key").text = key
            ET.SubElement(root, "UploadId").text = upload_id
            self._send(200, ET.tostring(root))
        elif self.command == "PUT" and "uploadId" in query:
            upload_id = query["uploadId"]
            part_number = int(query.get("partNumber", "0"))
            with state.lock:
                if upload_id not in state.uploads or part_number < 1:
                    self._error(404, "NoSuchUpload", "unknown upload id")
                    return
                state.uploads[upload_id][part_number] = body
            etag = hashlib.sha256(body).hexdigest()
            self.send_response(200)
            self.send_header("ETag", f'"{etag}"')
            self.send_header("Content-Length", "0")
            self.end_headers()
        elif self.command == "POST" and "uploadId" in query:
            upload_id = query["uploadId"]
            with state.lock:
                parts_map = state.uploads.pop(upload_id, None)
                stored_key = state.upload_keys.pop(upload_id, None)
                if parts_map is None or stored_key != key:
                    self._error(404, "NoSuchUpload", "unknown upload id")
                    return
                state.objects[key] = b"".join(
                    parts_map[n] for n in sorted(parts_map)
                )
            root = ET.Element("CompleteMultipartUploadResult")
            ET.SubElement(root, "Key").text = key
            self._send(200, ET.tostring(root))
        elif self.command == "DELETE" and "uploadId" in query:
            with state.lock:
                state.uploads.pop(query["uploadId"], None)
                state.upload_keys.pop(query["uploadId"], None)
            self._send(204)
        elif self.command == "PUT":
            with state.lock:
                state.objects[key] = body
            self._send(200)
        elif self.command in ("GET", "HEAD"):
            with state.lock:
                data = state.objects.get(key)
            if data is None:
                self._error(404, "NoSuchKey", "no such key")
            else:
                self._send(200, data, content_type="application/octet-stream")
        elif self.command == "DELETE":
            with state.lock:
                state.objects.pop(key, None)
            self._send(204)
        else:
            self._error(405, "MethodNotAllowed", self.command)

    do_GET = do_PUT = do_POST = do_DELETE = do_HEAD = _handle


class LocalS3Server:
    """Owns the HTTP thread; use as a context manager in tests."""

    def __init__(
        self,
        *,
        bucket: str = "artifacts",
        access_key: str = "dev-access",
        secret_key: str = "dev-secret",
        port: int = 0,
    ):
        self.state = _State(bucket, access_key, secret_key)
        handler = type("BoundHandler", (_Handler,), {"state": self.state})
        self._httpd = ThreadingHTTPServer(("127.0.0.1", port), handler)
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name="local-s3", daemon=True
        )

    @property
    def endpoint(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def fail_next(self, count: int) -> None:
        with self.state.lock:
            self.state.fail_remaining = count

    def __enter__(self) -> "LocalS3Server":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)
