"""Global multiply-accumulate counter for instrumented runs.

Disabled by default; the bench module enables it around a run to compare the
closed-form cost model against what actually executed.  Instrumented call
sites report matmul work exactly (2mnk from runtime shapes) and elementwise
work as (array passes in that function) x (actual array size).
"""

from __future__ import annotations

from contextlib import contextmanager


class FlopCounter:
    __slots__ = ("enabled", "total")

    def __init__(self):
        self.enabled = False
        self.total = 0

    def add(self, n: int) -> None:
        if self.enabled:
            self.total += int(n)

    def matmul(self, m: int, n: int, k: int) -> None:
        if self.enabled:
            self.total += 2 * int(m) * int(n) * int(k)


COUNTER = FlopCounter()


@contextmanager
def counting():
    """Enable the counter within a block; yields the counter object.

    The total survives block exit so callers can read it afterwards.  Not
    reentrant.
    """
    COUNTER.total = 0
    COUNTER.enabled = True
    try:
        yield COUNTER
    finally:
        COUNTER.enabled = False
