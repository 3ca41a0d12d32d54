"""AWS Signature Version 4 for the S3 wire protocol.

Implements header authorization and query presigning for the handful of
verbs the object store uses. Kept deliberately small; correctness is
pinned by the published AWS test vectors in the test suite.
"""

from __future__ import annotations

import hashlib
import hmac
from urllib.parse import quote

ALGORITHM = "AWS4-HMAC-SHA256"
UNSIGNED_PAYLOAD = "UNSIGNED-PAYLOAD"
EMPTY_SHA256 = hashlib.sha256(b"").hexdigest()


def _uri_encode(value: str, *, encode_slash: bool) -> str:
    safe = "-._~" if encode_slash else "-._~/"
    return quote(value, safe=safe)


def _canonical_query(params: dict[str, str]) -> str:
    pairs = sorted(
        (_uri_encode(k, encode_slash=True), _uri_encode(v, encode_slash=True))
        for k, v in params.items()
    )
    return "&".join(f"{k}={v}" for k, v in pairs)


def _signing_key(secret_key: str, date: str, region: str, service: str) -> bytes:
    def h(key: bytes, msg: str) -> bytes:
        return hmac.new(key, msg.encode(), hashlib.sha256).digest()

    k = h(b"AWS4" + secret_key.encode(), date)
    k = h(k, region)
    k = h(k, service)
    return h(k, "aws4_request")


def _scope(date: str, region: str) -> str:
    return f"{date}/{region}/s3/aws4_request"


def _string_to_sign(amz_date: str, scope: str, canonical_request: str) -> str:
    digest = hashlib.sha256(canonical_request.encode()).hexdigest()
    return f"{ALGORITHM}\n{amz_date}\n{scope}\n{digest}"


def sign_headers(
    *,
    method: str,
    host: str,
    uri: str,
    query: dict[str, str],
    headers: dict[str, str],
    payload_sha256: str,
    access_key: str,
    secret_key: str,
    region: str,
    amz_date: str,
) -> str:
    """Compute the Authorization header value for a header-signed request.

    `headers` must already include every header to be signed (host and
    x-amz-* at minimum); `amz_date` is the full YYYYMMDDTHHMMSSZ stamp.
    """
    all_headers = {**{k.lower(): v for k, v in headers.items()}, "host": host}
    signed_names = sorted(all_headers)
    canonical_headers = "".join(f"{k}:{all_headers[k].strip()}\n" for k in signed_names)
    signed_headers = ";".join(signed_names)
    canonical_request = "\n".join(
        (
            method,
            _uri_encode(uri, encode_slash=False),
            _canonical_query(query),
            canonical_headers,
            signed_headers,
            payload_sha256,
        )
    )
    date = amz_date[:8]
    scope = _scope(date, region)
    signature = hmac.new(
        _signing_key(secret_key, date, region, "s3"),
        _string_to_sign(amz_date, scope, canonical_request).encode(),
        hashlib.sha256,
    ).hexdigest()
    return (
        f"{ALGORITHM} Credential={access_key}/{scope}, "
        f"SignedHeaders={signed_headers}, Signature={signature}"
    )


def presign_url(
    *,
    method: str,
    scheme: str,
    host: str,
    uri: str,
    expires_seconds: int,
    access_key: str,
    secret_key: str,
    region: str,
    amz_date: str,
    extra_query: dict[str, str] | None = None,
) -> str:
    """Produce a query-signed URL valid for `expires_seconds`."""
    date = amz_date[:8]
    scope = _scope(date, region)
    params = {
        "X-Amz-Algorithm": ALGORITHM,
        "X-Amz-Credential": f"{access_key}/{scope}",
        "X-Amz-Date": amz_date,
        "X-Amz-Expires": str(expires_seconds),
        "X-Amz-SignedHeaders": "host",
        **(extra_query or {}),
    }
    canonical_request = "\n".join(
        (
            method,
            _uri_encode(uri, encode_slash=False),
            _canonical_query(params),
            f"host:{host}\n",
            "host",
            UNSIGNED_PAYLOAD,
        )
    )
    signature = hmac.new(
        _signing_key(secret_key, date, region, "s3"),
        _string_to_sign(amz_date, scope, canonical_request).encode(),
        hashlib.sha256,
    ).hexdigest()
    query = _canonical_query(params) + f"&X-Amz-Signature={signature}"
    return f"{scheme}://{host}{_uri_encode(uri, encode_slash=False)}?{query}"


def verify_presigned_query(
    *,
    method: str,
    host: str,
    uri: str,
    query: dict[str, str],
    secret_key: str,
    now_epoch: float,
) -> tuple[bool, str]:
    """Server-side check of a presigned query (used by the local test double).

    Returns (ok, reason). Recomputes the signature from the presented
    parameters and checks the expiry window.
    """
    import calendar
    import time

    required = (
        "X-Amz-Algorithm",
        "X-Amz-Credential",
        "X-Amz-Date",
        "X-Amz-Expires",
        "X-Amz-SignedHeaders",
        "X-Amz-Signature",
    )
    if any(k not in query for k in required):
        return False, "missing presign parameters"
    if query["X-Amz-Algorithm"] != ALGORITHM:
        return False, "unsupported algorithm"
    amz_date = query["X-Amz-Date"]
    try:
        issued = calendar.timegm(time.strptime(amz_date, "%Y%m%dT%H%M%SZ"))
    except ValueError:
        return False, "bad X-Amz-Date"
    if now_epoch > issued + int(query["X-Amz-Expires"]):
        return False, "request has expired"
    credential = query["X-Amz-Credential"]
    access_key, date, region, service, terminal = credential.split("/")
    params = {k: v for k, v in query.items() if k != "X-Amz-Signature"}
    expected = presign_url(
        method=method,
        scheme="https",
        host=host,
        uri=uri,
        expires_seconds=int(query["X-Amz-Expires"]),
        access_key=access_key,
        secret_key=secret_key,
        region=region,
        amz_date=amz_date,
        extra_query={
            k: v
            for k, v in params.items()
            if k
            not in (
                "X-Amz-Algorithm",
                "X-Amz-Credential",
                "X-Amz-Date",
                "X-Amz-Expires",
                "X-Amz-SignedHeaders",
            )
        },
    )
    presented = query["X-Amz-Signature"]
    recomputed = expected.rsplit("X-Amz-Signature=", 1)[1]
    if not hmac.compare_digest(presented, recomputed):
        return False, "signature mismatch"
    return True, ""
