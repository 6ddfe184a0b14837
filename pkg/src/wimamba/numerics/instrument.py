"""Multiply-accumulate counting and live-tensor byte accounting.

Both counters are process-global and single-threaded. Kernels report their
work through :func:`add_macs`; tensors report owned buffers through the
active :class:`AllocationTracker`.
"""
from contextlib import contextmanager

_mac_total = 0
_tracker = None


def add_macs(n):
    global _mac_total
    _mac_total += int(n)


class MacCounter:
    def __init__(self):
        self._start = _mac_total
        self.count = 0

    def _stop(self):
        self.count = _mac_total - self._start


@contextmanager
def count_macs():
    """Count multiply-accumulates issued inside the block.

    >>> with count_macs() as c:
    ...     pass
    >>> c.count
    0
    """
    counter = MacCounter()
    try:
        yield counter
    finally:
        counter._stop()


class AllocationTracker:
    """High-water mark of bytes held by live tensors and kernel scratch."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def alloc(self, nbytes):
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def free(self, nbytes):
        self.live -= nbytes


def active_tracker():
    return _tracker


@contextmanager
def track_allocations():
    global _tracker
    previous = _tracker
    tracker = AllocationTracker()
    _tracker = tracker
    try:
        yield tracker
    finally:
        _tracker = previous


@contextmanager
def scratch(*arrays):
    """Account for temporary kernel buffers for the duration of the block."""
    tracker = _tracker
    nbytes = sum(a.nbytes for a in arrays)
    if tracker is not None:
        tracker.alloc(nbytes)
    try:
        yield
    finally:
        if tracker is not None:
            tracker.free(nbytes)
