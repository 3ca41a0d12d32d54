"""Per-client token buckets.

The service has no user accounts, so abuse control is a budget per
client address. Buckets are per replica (a client talking to
N replicas gets N budgets); that keeps the limiter lock-local and is
accurate enough for its purpose.
"""

from __future__ import annotations

import threading
import time
from typing import Callable


class RateLimiter:
    def __init__(
        self,
        per_minute: float,
        burst: int,
        *,
        clock: Callable[[], float] = time.monotonic,
    ):
        assert per_minute > 0 and burst >= 1
        self._rate = per_minute / 60.0
        self._burst = float(burst)
        self._clock = clock
        self._buckets: dict[str, tuple[float, float]] = {}  # key -> (tokens, stamp)
        self._lock = threading.Lock()

    def allow(self, key: str) -> bool:
        now = self._clock()
        with self._lock:
            tokens, stamp = self._buckets.get(key, (self._burst, now))
            tokens = min(self._burst, tokens + (now - stamp) * self._rate)
            allowed = tokens >= 1.0
            self._buckets[key] = (tokens - 1.0 if allowed else tokens, now)
            if len(self._buckets) > 10_000:
                self._prune(now)
            return allowed

    def _prune(self, now: float) -> None:
        # a bucket refilled to burst carries no state worth keeping
        horizon = self._burst / self._rate
        self._buckets = {
            k: (t, s) for k, (t, s) in self._buckets.items() if now - s < horizon
        }
