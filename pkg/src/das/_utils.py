"""Shared helpers: seeded random streams, argument checks, tie-breaking."""

from contextlib import contextmanager

import numpy as np

# Stream purposes within one trial. A generator drawn for (seed, trial, purpose,
# round) never collides with any other tuple, so trials and rounds are isolated.
STREAM_INSTANCE = 0
STREAM_POLICY = 1
STREAM_DOWNLINK = 2
STREAM_ACCESS = 3

TIE_RTOL = 1e-12

_stream_log = None


class InvalidArgument(ValueError):
    """Raised when an operation is called outside its domain."""


def rng_stream(seed, *key):
    """Return a Generator for the sub-stream ``key`` of the experiment ``seed``.

    ``key`` is a tuple of non-negative integers such as ``(trial, purpose, round)``.
    Distinct keys give statistically independent streams (NumPy ``SeedSequence``
    spawn keys).
    """
    seed = int(seed)
    if seed < 0:
        raise InvalidArgument(f"seed must be non-negative, got {seed}")
    key = tuple(int(k) for k in key)
    if _stream_log is not None:
        _stream_log.append((seed, key))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@contextmanager
def track_streams():
    """Collect every ``(seed, key)`` handed out by :func:`rng_stream` in this block."""
    global _stream_log
    outer, _stream_log = _stream_log, []
    try:
        yield _stream_log
    finally:
        _stream_log = outer


def check_count(name, value, minimum=0):
    if isinstance(value, (bool, np.bool_)) or int(value) != value:
        raise InvalidArgument(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < minimum:
        raise InvalidArgument(f"{name} must be >= {minimum}, got {value}")
    return value


def check_probability(name, value):
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise InvalidArgument(f"{name} must lie in [0, 1], got {value}")
    return value


def argmax_lowest(scores, candidates, rtol=TIE_RTOL):
    """Index in ``candidates`` with the largest score; near-ties go to the lowest index.

    Scores within ``rtol`` (relative to the largest magnitude) of the maximum
    count as tied, which keeps the choice stable under round-off.
    """
    candidates = np.asarray(candidates)
    s = np.asarray(scores, dtype=float)[candidates]
    top = np.max(s)
    if np.isfinite(top):
        tied = candidates[s >= top - rtol * abs(top)]
    else:
        tied = candidates[s == top]
    return int(np.min(tied))
