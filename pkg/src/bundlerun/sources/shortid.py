"""Short identifiers for directly uploaded bundles.

Ids are minted from an alphabet that drops 0/1/l/o so a link read aloud
or retyped from a printed page survives the trip. Five characters give
~33.5M combinations; on collision we retry, and after the first retry
the length grows, so the space expands long before it gets crowded.
"""

from __future__ import annotations

import random
import re

ALPHABET = "abcdefghijkmnpqrstuvwxyz23456789"

MIN_LENGTH = 5
MAX_LENGTH = 8

# what a stored id must look like (superset of what we mint: the minted
# alphabet additionally excludes l and o)
SHORT_ID_RE = re.compile(r"^[a-z2-9]{5,8}$")

_ALPHABET_SET = frozenset(ALPHABET)


def mint(rng: random.Random, length: int = MIN_LENGTH) -> str:
    """Draw one candidate id of the given length."""
    return "".join(rng.choice(ALPHABET) for _ in range(length))


def length_for_attempt(attempt: int) -> int:
    """Length schedule: 5, then on repeated collision 5, 6, 7, 8, 8, ..."""
    return min(MIN_LENGTH + max(0, attempt - 1), MAX_LENGTH)


def is_short_id(value: str) -> bool:
    """True if `value` could have been minted here (used for URL routing)."""
    return bool(SHORT_ID_RE.fullmatch(value)) and set(value) <= _ALPHABET_SET
