"""Job state machine: the single authority on legal transitions."""

from __future__ import annotations

from bundlerun.errors import IllegalTransition

JOB_STATES = (
    "QUEUED",
    "BUILDING",
    "RUNNING",
    "SUCCEEDED",
    "FAILED",
    "TIMEOUT",
    "CANCELLED",
)

TERMINAL_STATES = frozenset({"SUCCEEDED", "FAILED", "TIMEOUT", "CANCELLED"})

# RUNNING→BUILDING is the lost-image repair arc; the executor takes it at
# most once per job. BUILDING→FAILED covers build errors and crash recovery.
_ALLOWED = frozenset(
    {
        ("QUEUED", "BUILDING"),
        ("BUILDING", "RUNNING"),
        ("BUILDING", "FAILED"),
        ("RUNNING", "SUCCEEDED"),
        ("RUNNING", "FAILED"),
        ("RUNNING", "TIMEOUT"),
        ("RUNNING", "BUILDING"),
        ("QUEUED", "CANCELLED"),
        ("BUILDING", "CANCELLED"),
        ("RUNNING", "CANCELLED"),
    }
)


def is_terminal(state: str) -> bool:
    return state in TERMINAL_STATES


def check_transition(old: str, new: str) -> None:
    if old not in JOB_STATES or new not in JOB_STATES:
        raise IllegalTransition(f"unknown job state in {old!r} -> {new!r}")
    if (old, new) not in _ALLOWED:
        raise IllegalTransition(f"job may not move {old} -> {new}")
