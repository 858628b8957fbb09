"""Per-operation invocation counters for ablation auditing.

Counting is off by default and costs one attribute check per call site.
Enable it around a run to assert which code paths a flag actually touched.
"""

from __future__ import annotations

from collections import Counter
from contextlib import contextmanager

_enabled = False
_counts: Counter = Counter()


def record(op: str):
    if _enabled:
        _counts[op] += 1


def counters() -> dict:
    return dict(_counts)


def reset():
    _counts.clear()


@contextmanager
def auditing():
    """Enable counters inside the block; counters persist until reset()."""
    global _enabled
    prev = _enabled
    _enabled = True
    try:
        yield _counts
    finally:
        _enabled = prev
