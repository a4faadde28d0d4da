"""Window based flow control for one connection.

The sender counts bytes it has handed to the connection that the receiver
has not yet confirmed and blocks once ``limit`` would be exceeded.  The
receiver slices the bytes it processed into windows of ``unit`` bytes and
returns the number of full windows as a small count (< 128) that rides in
the immediate data of the next work request.

Two readings of the (window size, threshold) pair are supported:

``slice`` (default)
    limit = window_size, unit = window_size * threshold.
    16 MiB / 0.1 gives a 16 MiB limit confirmed in 1.6 MiB slices.
``scaled``
    limit = window_size / threshold, unit = window_size.
"""

from __future__ import annotations

import threading
import time

from .errors import InvalidSize, SendTimeout, Underflow
from .parking import YieldingLock

FC_MAX_PENDING = 127
DEFAULT_WINDOW = 16 * 1024 * 1024
DEFAULT_THRESHOLD = 0.1


def window_geometry(window_size: int, threshold: float, mode: str = "slice") -> tuple:
    """Return ``(limit, unit)`` in bytes."""
    if mode == "slice":
        return window_size, int(window_size * threshold)
    if mode == "scaled":
        return int(window_size / threshold), window_size
    raise ValueError(f"unknown flow control mode {mode!r}")


class FlowControl:
    def __init__(self, window_size: int = DEFAULT_WINDOW, threshold: float = DEFAULT_THRESHOLD,
                 mode: str = "slice"):
        self.window_size = window_size
        self.threshold = threshold
        self.mode = mode
        self.limit, self.unit = window_geometry(window_size, threshold, mode)
        if self.unit < 1:
            raise ValueError("flow control window slice must be at least one byte")
        # sender side
        self.unconfirmed = 0
        # receiver side
        self.received_unacked = 0
        self._pending = 0
        self._carry = 0
        self._lock = YieldingLock()
        self._cond = threading.Condition(self._lock)

    # -- sender ----------------------------------------------------------------

    def on_send_attempt(self, nbytes: int) -> bool:
        """Account ``nbytes`` and return True, or return False if it must wait."""
        if nbytes > self.limit:
            raise InvalidSize(f"{nbytes} bytes exceed the flow control limit {self.limit}")
        with self._lock:
            if self.unconfirmed + nbytes > self.limit:
                return False
            self.unconfirmed += nbytes
            return True

    def acquire(self, nbytes: int, timeout: float | None = None) -> None:
        """Blocking variant of :meth:`on_send_attempt`."""
        if nbytes > self.limit:
            raise InvalidSize(f"{nbytes} bytes exceed the flow control limit {self.limit}")
        with self._cond:
            if self.unconfirmed + nbytes <= self.limit:
                self.unconfirmed += nbytes
                return
            deadline = None if timeout is None else time.monotonic() + timeout
            while self.unconfirmed + nbytes > self.limit:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise SendTimeout("flow control window exhausted")
                self._cond.wait(remaining)
            self.unconfirmed += nbytes

    def on_fc_confirmed(self, windows: int) -> None:
        if windows == 0:
            return
        amount = windows * self.unit
        with self._cond:
            if amount > self.unconfirmed:
                raise Underflow(f"{windows} windows confirmed, {self.unconfirmed} bytes outstanding")
            self.unconfirmed -= amount
            self._cond.notify_all()

    # -- receiver --------------------------------------------------------------

    def on_data_received(self, nbytes: int) -> int:
        """Account processed bytes; returns the number of newly completed windows."""
        with self._lock:
            total = self.received_unacked + nbytes
            windows, self.received_unacked = divmod(total, self.unit)
            if windows:
                queued = self._pending + self._carry + windows
                self._pending = min(queued, FC_MAX_PENDING)
                self._carry = queued - self._pending
            return windows

    def take_pending_fc(self) -> int:
        """Windows waiting to be sent; left in place until confirmed posted."""
        return self._pending

    def confirm_fc_posted(self, windows: int) -> None:
        if windows == 0:
            return
        with self._lock:
            if windows > self._pending:
                raise Underflow(f"posted {windows} fc windows, {self._pending} pending")
            self._pending -= windows
            move = min(self._carry, FC_MAX_PENDING - self._pending)
            self._pending += move
            self._carry -= move

    @property
    def pending_windows(self) -> int:
        return self._pending + self._carry
