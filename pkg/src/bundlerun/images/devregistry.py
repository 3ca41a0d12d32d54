"""In-memory registry server for development and tests.

Implements the endpoint subset RegistryClient uses: version check, blob
HEAD/GET/monolithic-POST/DELETE, manifest HEAD/GET/PUT/DELETE with tag and
digest references.
"""

from __future__ import annotations

import hashlib
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qsl, urlsplit

_BLOB = re.compile(r"^/v2/(?P<name>.+)/blobs/(?P<digest>sha256:[a-f0-9]{64})$")
_UPLOAD = re.compile(r"^/v2/(?P<name>.+)/blobs/uploads/$")
_MANIFEST = re.compile(r"^/v2/(?P<name>.+)/manifests/(?P<ref>[^/]+)$")


class _State:
    def __init__(self):
        self.blobs: dict[str, bytes] = {}
        self.manifests: dict[str, bytes] = {}  # by digest
        self.tags: dict[tuple[str, str], str] = {}  # (name, tag) -> digest
        self.fail_remaining = 0
        self.lock = threading.Lock()


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    state: _State

    def log_message(self, fmt, *args):
        pass

    def _send(self, status: int, body: bytes = b"", headers: dict | None = None):
        self.send_response(status)
        self.send_header("Content-Length", str(len(body)))
        for k, v in (headers or {}).items():
            self.send_header(k, v)
        self.end_headers()
        if self.command != "HEAD" and body:
            self.wfile.write(body)

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _resolve(self, name: str, ref: str) -> str | None:
        if ref.startswith("sha256:"):
            return ref
        return self.state.tags.get((name, ref))

    def _handle(self):
        state = self.state
        with state.lock:
            if state.fail_remaining > 0:
                state.fail_remaining -= 1
                self._send(503, b"injected failure")
                return
        parts = urlsplit(self.path)
        path = parts.path
        query = dict(parse_qsl(parts.query))
        body = self._read_body()

        if path == "/v2/" and self.command in ("GET", "HEAD"):
            self._send(200, b"{}")
            return

        m = _UPLOAD.match(path)
        if m and self.command == "POST":
            digest = query.get("digest", "")
            actual = "sha256:" + hashlib.sha256(body).hexdigest()
            if digest != actual:
                self._send(400, b"digest mismatch")
                return
            with state.lock:
                state.blobs[digest] = body
            self._send(201, headers={"Docker-Content-Digest": digest})
            return

        m = _BLOB.match(path)
        if m:
            digest = m.group("digest")
            if self.command in ("GET", "HEAD"):
                with state.lock:
                    data = state.blobs.get(digest)
                if data is None:
                    self._send(404, b"blob unknown")
                else:
                    self._send(200, data, {"Docker-Content-Digest": digest})
            elif self.command == "DELETE":
                with state.lock:
                    state.blobs.pop(digest, None)
                self._send(202)
            else:
                self._send(405)
            return

        m = _MANIFEST.match(path)
        if m:
            name, ref = m.group("name"), m.group("ref")
            if self.command == "PUT":
                digest = "sha256:" + hashlib.sha256(body).hexdigest()
                with state.lock:
                    state.manifests[digest] = body
                    if not ref.startswith("sha256:"):
                        state.tags[(name, ref)] = digest
                self._send(201, headers={"Docker-Content-Digest": digest})
            elif self.command in ("GET", "HEAD"):
                digest = self._resolve(name, ref)
                with state.lock:
                    data = state.manifests.get(digest) if digest else None
                if data is None:
                    self._send(404, b"manifest unknown")
                else:
                    self._send(200, data, {"Docker-Content-Digest": digest})
            elif self.command == "DELETE":
                with state.lock:
                    digest = self._resolve(name, ref)
                    if digest:
                        state.manifests.pop(digest, None)
                    state.tags = {
                        k: v
                        for k, v in state.tags.items()
                        if v != digest and k != (name, ref)
                    }
                self._send(202)
            else:
                self._send(405)
            return

        self._send(404, b"unknown route")

    do_GET = do_PUT = do_POST = do_DELETE = do_HEAD = _handle


class DevRegistry:
    """Threaded registry test double; context-manage in tests."""

    def __init__(self, port: int = 0):
        self.state = _State()
        handler = type("BoundHandler", (_Handler,), {"state": self.state})
        self._httpd = ThreadingHTTPServer(("127.0.0.1", port), handler)
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name="dev-registry", daemon=True
        )

    @property
    def endpoint(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def fail_next(self, count: int) -> None:
        with self.state.lock:
            self.state.fail_remaining = count

    def start(self) -> "DevRegistry":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> "DevRegistry":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
