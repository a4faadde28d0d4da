"""Per-connection outgoing ring buffer (ORB).

Producers reserve a region, serialize into it and commit.  The send engine
reads the ready-to-send range and moves two pointers of its own::

    front <= front_posted <= back <= reserved <= front + capacity

    [front, front_posted)    posted to the send queue, not yet confirmed
    [front_posted, back)     committed, ready to send, not posted
    [back, reserved)         reserved by producers, still being written
    [reserved, front + cap)  free

All positions are monotonic counters; addresses are ``counter & mask``.
Commits become visible in reservation order: ``back`` only moves over a
reservation once every earlier reservation has been committed.
"""

from __future__ import annotations

import threading
import time

from .errors import DoubleCommit, InvalidSize, OverAdvance, SendTimeout, WouldBlock
from .parking import YieldingLock

DEFAULT_CAPACITY = 4 * 1024 * 1024


class Reservation:
    """Exclusive region handed to one producer between reserve and commit."""

    __slots__ = ("start", "size", "segments", "committed")

    def __init__(self, start, size, segments):
        self.start = start
        self.size = size
        self.segments = segments
        self.committed = False

    def __repr__(self):
        return f"Reservation(start={self.start}, size={self.size})"


class OutgoingRingBuffer:
    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity <= 0 or capacity & (capacity - 1):
            raise ValueError(f"capacity must be a power of two, got {capacity}")
        self.capacity = capacity
        self._mask = capacity - 1
        self.storage = bytearray(capacity)
        self._view = memoryview(self.storage)
        self.front = 0
        self.front_posted = 0
        self.back = 0
        self._reserved = 0
        # start -> end of reservations committed ahead of ``back``
        self._early = {}
        self._lock = YieldingLock()
        self._space = threading.Condition(self._lock)

    # -- producer side -----------------------------------------------------

    def segments(self, pos: int, length: int) -> list:
        """Views over ``length`` bytes starting at capacity-relative ``pos``."""
        end = pos + length
        if end <= self.capacity:
            return [self._view[pos:end]]
        return [self._view[pos:], self._view[:end - self.capacity]]

    def reserve(self, size: int) -> Reservation:
        if size <= 0 or size > self.capacity:
            raise InvalidSize(f"cannot reserve {size} bytes in a {self.capacity} byte ring")
        with self._lock:
            start = self._reserved
            if start + size - self.front > self.capacity:
                raise WouldBlock(size)
            self._reserved = start + size
        return Reservation(start, size, self.segments(start & self._mask, size))

    def reserve_blocking(self, size: int, timeout: float | None = None) -> Reservation:
        """Like :meth:`reserve` but waits for the engine to free space."""
        if size <= 0 or size > self.capacity:
            raise InvalidSize(f"cannot reserve {size} bytes in a {self.capacity} byte ring")
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._space:
            while self._reserved + size - self.front > self.capacity:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise SendTimeout(f"no ORB space for {size} bytes")
                self._space.wait(remaining)
            start = self._reserved
            self._reserved = start + size
        return Reservation(start, size, self.segments(start & self._mask, size))

    def commit(self, res: Reservation) -> None:
        with self._lock:
            if res.committed:
                raise DoubleCommit(res)
            res.committed = True
            end = res.start + res.size
            if res.start == self.back:
                early = self._early
                while end in early:
                    end = early.pop(end)
                self.back = end
            else:
                self._early[res.start] = end

    # -- engine side ---------------------------------------------------------

    def snapshot_ready(self) -> tuple:
        """(posFrontRel, posBackRel) of the ready-to-send range."""
        return self.front_posted & self._mask, self.back & self._mask

    def ready_length(self) -> int:
        return self.back - self.front_posted

    def ready(self) -> tuple:
        """(posFrontRel, posBackRel, length) from a single read of ``back``."""
        back, front = self.back, self.front_posted
        return front & self._mask, back & self._mask, back - front

    def advance_posted(self, n: int) -> None:
        if n < 0 or self.front_posted + n > self.back:
            raise OverAdvance(f"post {n} with {self.back - self.front_posted} ready")
        self.front_posted += n

    def advance_confirmed(self, n: int) -> None:
        if n == 0:
            return
        with self._lock:
            if n < 0 or self.front + n > self.front_posted:
                raise OverAdvance(f"confirm {n} with {self.front_posted - self.front} posted")
            self.front += n
            self._space.notify_all()

    # -- inspection ----------------------------------------------------------

    def free_bytes(self) -> int:
        return self.capacity - (self._reserved - self.front)

    @property
    def reserved(self) -> int:
        return self._reserved

    def check_invariants(self) -> None:
        # the lock freezes front, back and reserved; front_posted only grows towards back
        with self._lock:
            f, fp, b, r = self.front, self.front_posted, self.back, self._reserved
        assert 0 <= f <= fp <= b <= r, (f, fp, b, r)
        assert r - f <= self.capacity, (f, r)
