"""Bundle sources: uploads, repository providers, and permanent URLs."""

from bundlerun.sources.providers import (
    BUNDLE_SUFFIX,
    DEFAULT_ENDPOINTS,
    EPHEMERAL,
    PERSISTENT,
    UPLOAD_PROVIDER,
    FigshareProvider,
    OsfProvider,
    Provider,
    ProviderRegistry,
    SourceRef,
    TemplateProvider,
    download_source,
)
from bundlerun.sources.records import (
    DEFAULT_RETENTION_DAYS,
    ReproRecord,
    SourceRecords,
    manifest_summary,
)
from bundlerun.sources.shortid import (
    ALPHABET,
    MAX_LENGTH,
    MIN_LENGTH,
    SHORT_ID_RE,
    is_short_id,
    length_for_attempt,
    mint,
)

__all__ = [
    "ALPHABET",
    "BUNDLE_SUFFIX",
    "DEFAULT_ENDPOINTS",
    "DEFAULT_RETENTION_DAYS",
    "EPHEMERAL",
    "FigshareProvider",
    "MAX_LENGTH",
    "MIN_LENGTH",
    "OsfProvider",
    "PERSISTENT",
    "Provider",
    "ProviderRegistry",
    "ReproRecord",
    "SHORT_ID_RE",
    "SourceRecords",
    "SourceRef",
    "TemplateProvider",
    "UPLOAD_PROVIDER",
    "download_source",
    "is_short_id",
    "length_for_attempt",
    "manifest_summary",
    "mint",
]
