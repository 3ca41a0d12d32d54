"""Typed errors shared across the service.

Grouped by the subsystem that raises them; HTTP mapping lives in the
service layer, not here.
"""

from __future__ import annotations


class BundlerunError(Exception):
    """Base class for all errors raised by this package."""


# --- bundle format ---------------------------------------------------------

class MalformedArchive(BundlerunError):
    """Input is not a valid bundle archive."""


class InvalidManifest(MalformedArchive):
    """Archive is well-formed but the manifest violates the schema."""


class MissingManifest(MalformedArchive):
    """No manifest entry at the fixed archive path."""


class UnsupportedVersion(BundlerunError):
    """Manifest declares a format_version this build does not support."""


class PathTraversal(BundlerunError):
    """A path would escape its designated root."""


class SizeLimitExceeded(BundlerunError):
    """A stream exceeded the caller-supplied size limit."""


class InconsistentManifest(BundlerunError):
    """Manifest references a path absent from the supplied file set."""


# --- image building --------------------------------------------------------

class UnsupportedArchitecture(BundlerunError):
    """Manifest architecture is not in the supported set."""


class BuildFailed(BundlerunError):
    """Image build backend failed; carries the captured build log."""

    def __init__(self, message: str, build_log: str = ""):
        super().__init__(message)
        self.build_log = build_log


class RegistryUnavailable(BundlerunError):
    """Image registry cannot be reached."""


class BaseImagePullFailed(BundlerunError):
    """Configured base image could not be obtained."""


class MalformedDataTree(BundlerunError):
    """Bundle's inner data archive is corrupt or unsafe."""


# --- job engine ------------------------------------------------------------

class UnknownBundle(BundlerunError):
    """No bundle with this digest is known to the system."""


class InvalidOverride(BundlerunError):
    """Override references a run id or input name the manifest lacks."""


class LimitsExceedPolicy(BundlerunError):
    """Requested resource limits exceed the configured global caps."""


class ImageMissing(BundlerunError):
    """Cached image disappeared between scheduling and execution."""


class SandboxFailure(BundlerunError):
    """Container runtime failed for reasons other than the experiment."""


class UnknownJob(BundlerunError):
    """No job with this id."""


class OffsetOutOfRange(BundlerunError):
    """Log read offset is beyond the end of the log."""


class QueueFull(BundlerunError):
    """Job queue is at its configured bound."""


class IllegalTransition(BundlerunError):
    """Attempted job state change violates the state machine."""


# --- source resolution -----------------------------------------------------

class UnknownProvider(BundlerunError):
    """Provider name is not in the registry."""


class NotFound(BundlerunError):
    """Provider reports no such record."""


class ProviderUnavailable(BundlerunError):
    """Upstream provider returned a 5xx or timed out (retryable)."""


class NotABundle(BundlerunError):
    """Resolved file failed bundle parsing."""


class AmbiguousArticle(BundlerunError):
    """Provider record holds several candidate bundle files."""


class SourceGone(BundlerunError):
    """Ephemeral upload expired or provider no longer has the file."""


class DigestMismatch(BundlerunError):
    """Fetched or stored bytes do not match the recorded digest."""


class StorageUnavailable(BundlerunError):
    """Relational store cannot be reached."""


# --- object store ----------------------------------------------------------

class StoreUnavailable(BundlerunError):
    """Object store backend cannot be reached."""


class UnknownObject(BundlerunError):
    """No object at this key."""


class TtlExceedsPolicy(BundlerunError):
    """Requested presign TTL is beyond the configured maximum."""


# --- service ----------------------------------------------------------------

class InvalidConfig(BundlerunError):
    """Service configuration failed validation; refuse to start."""


class RateLimited(BundlerunError):
    """Client exceeded its request budget."""
