"""Bundle source providers.

A provider turns a repository-native identifier into a concrete download
URL by asking the repository's public API. The registry maps provider
names (the first path segment of a reproduction URL) to providers, and
its endpoint templates come from configuration, so pointing at a mock
server in tests — or adding a plain-download repository in production —
is a config change, not a code change.
"""

from __future__ import annotations

import dataclasses
import json
from typing import BinaryIO, Mapping, Protocol

import httpx

from bundlerun.errors import (
    AmbiguousArticle,
    NotABundle,
    NotFound,
    ProviderUnavailable,
    SizeLimitExceeded,
    SourceGone,
    UnknownProvider,
)

PERSISTENT = "persistent"
EPHEMERAL = "ephemeral"

# pseudo-provider for direct uploads; never appears in the registry
UPLOAD_PROVIDER = "upload"

BUNDLE_SUFFIX = ".rpz"

OSF_ENDPOINT = "https://api.osf.io/v2/files/{id}/"
FIGSHARE_ENDPOINT = "https://api.figshare.com/v2/articles/{id}"

DEFAULT_ENDPOINTS: Mapping[str, str] = {
    "osf.io": OSF_ENDPOINT,
    "figshare.com": FIGSHARE_ENDPOINT,
}


@dataclasses.dataclass(frozen=True)
class SourceRef:
    """Where a bundle comes from and whether that source is durable."""

    provider: str
    external_id: str
    download_url: str | None = None
    persistence_class: str = PERSISTENT
    resolved_bundle_digest: str | None = None

    def __post_init__(self):
        if not self.external_id:
            raise ValueError("external_id must be non-empty")
        if self.persistence_class not in (PERSISTENT, EPHEMERAL):
            raise ValueError(f"bad persistence class {self.persistence_class!r}")
        # uploads are the one source we cannot re-fetch
        if self.provider == UPLOAD_PROVIDER and self.persistence_class != EPHEMERAL:
            raise ValueError("uploads are ephemeral")
        if self.provider in DEFAULT_ENDPOINTS and self.persistence_class != PERSISTENT:
            raise ValueError(f"{self.provider} sources are persistent")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, raw: str) -> "SourceRef":
        return cls(**json.loads(raw))


class Provider(Protocol):
    name: str

    def resolve(self, external_id: str) -> SourceRef: ...


def _request_json(client: httpx.Client, url: str, provider: str) -> dict:
    try:
        resp = client.get(url)
    except httpx.HTTPError as exc:
        raise ProviderUnavailable(f"{provider}: {type(exc).__name__} for {url}") from exc
    if resp.status_code in (404, 410):
        raise NotFound(f"{provider}: no record at {url}")
    if resp.status_code >= 500:
        raise ProviderUnavailable(f"{provider}: upstream returned {resp.status_code}")
    if resp.status_code >= 400:
        # 401/403: exists but not public — indistinguishable from absent for us
        raise NotFound(f"{provider}: record not accessible ({resp.status_code})")
    try:
        doc = resp.json()
    except ValueError as exc:
        raise ProviderUnavailable(f"{provider}: non-JSON response from {url}") from exc
    if not isinstance(doc, dict):
        raise ProviderUnavailable(f"{provider}: unexpected response shape from {url}")
    return doc


class OsfProvider:
    """Open Science Framework: file lookup by GUID via the v2 REST API."""

    name = "osf.io"

    def __init__(self, client: httpx.Client, endpoint: str = OSF_ENDPOINT):
        self._client = client
        self._endpoint = endpoint

    def resolve(self, external_id: str) -> SourceRef:
        doc = _request_json(self._client, self._endpoint.format(id=external_id), self.name)
        data = doc.get("data") or {}
        link = (data.get("links") or {}).get("download")
        if not link:
            raise NotABundle(f"osf.io: {external_id} is not a downloadable file")
        return SourceRef(self.name, external_id, download_url=link)


class FigshareProvider:
    """figshare: article lookup, picking the article's single bundle file."""

    name = "figshare.com"

    def __init__(self, client: httpx.Client, endpoint: str = FIGSHARE_ENDPOINT):
        self._client = client
        self._endpoint = endpoint

    def resolve(self, external_id: str) -> SourceRef:
        doc = _request_json(self._client, self._endpoint.format(id=external_id), self.name)
        files = doc.get("files") or []
        candidates = [f for f in files if str(f.get("name", "")).endswith(BUNDLE_SUFFIX)]
        if not candidates and len(files) == 1:
            candidates = files  # a single-file article is unambiguous
        if not candidates:
            raise NotABundle(
                f"figshare.com: article {external_id} has no {BUNDLE_SUFFIX} file"
            )
        if len(candidates) > 1:
            names = ", ".join(sorted(str(f.get("name")) for f in candidates))
            raise AmbiguousArticle(
                f"figshare.com: article {external_id} has several bundle files: {names}"
            )
        url = candidates[0].get("download_url")
        if not url:
            raise NotABundle(f"figshare.com: article {external_id} file has no download URL")
        return SourceRef(self.name, external_id, download_url=str(url))


class TemplateProvider:
    """Repository whose download URL is a pure function of the id.

    This is the no-code-change extension point: a config entry mapping a
    new provider name to a URL template yields one of these.
    """

    def __init__(self, name: str, template: str):
        self.name = name
        self._template = template

    def resolve(self, external_id: str) -> SourceRef:
        url = self._template.format(id=external_id)
        return SourceRef(self.name, external_id, download_url=url)


class ProviderRegistry:
    def __init__(
        self,
        endpoints: Mapping[str, str] | None = None,
        *,
        timeout: float = 20.0,
        client: httpx.Client | None = None,
    ):
        merged = dict(DEFAULT_ENDPOINTS)
        merged.update(endpoints or {})
        self._client = client or httpx.Client(timeout=timeout, follow_redirects=True)
        self._providers: dict[str, Provider] = {}
        for name, template in sorted(merged.items()):
            if "{id}" not in template:
                raise ValueError(f"provider {name!r}: endpoint template must contain {{id}}")
            if name == "osf.io":
                self._providers[name] = OsfProvider(self._client, template)
            elif name == "figshare.com":
                self._providers[name] = FigshareProvider(self._client, template)
            else:
                self._providers[name] = TemplateProvider(name, template)

    @property
    def client(self) -> httpx.Client:
        return self._client

    def names(self) -> list[str]:
        return sorted(self._providers)

    def __contains__(self, name: str) -> bool:
        return name in self._providers

    def get(self, name: str) -> Provider:
        try:
            return self._providers[name]
        except KeyError:
            raise UnknownProvider(f"no provider {name!r} is registered") from None

    def close(self) -> None:
        self._client.close()


def download_source(
    client: httpx.Client,
    source: SourceRef,
    sink: BinaryIO,
    *,
    size_cap: int | None = None,
) -> int:
    """Stream a resolved source's bytes into `sink`; returns the byte count."""
    if not source.download_url:
        raise SourceGone(f"{source.provider}:{source.external_id} has no download URL")
    total = 0
    try:
        with client.stream("GET", source.download_url) as resp:
            if resp.status_code in (404, 410):
                raise SourceGone(
                    f"{source.provider}: download for {source.external_id} is gone "
                    f"({resp.status_code})"
                )
            if resp.status_code >= 500:
                raise ProviderUnavailable(
                    f"{source.provider}: download failed with {resp.status_code}"
                )
            if resp.status_code >= 400:
                raise SourceGone(
                    f"{source.provider}: download rejected ({resp.status_code})"
                )
            for chunk in resp.iter_bytes(65536):
                total += len(chunk)
                if size_cap is not None and total > size_cap:
                    raise SizeLimitExceeded(
                        f"{source.provider}: download exceeds the {size_cap}-byte cap"
                    )
                sink.write(chunk)
    except httpx.HTTPError as exc:
        raise ProviderUnavailable(
            f"{source.provider}: {type(exc).__name__} during download"
        ) from exc
    return total
