"""Write interest manager: which connection the send thread services next."""

from __future__ import annotations

import threading

from .errors import UnknownNode

COUNTER_MAX = 0xFFFFFFFF


class WriteInterestManager:
    """FIFO ring of node ids with per-node data and flow-control counters.

    A node id is enqueued only when both of its counters were zero before
    the signalling increment, so it is in the ring at most once and the
    ring never needs more than ``max_connections`` slots.  Draining swaps
    both counters to zero; a signal that arrives afterwards sees zero and
    re-enqueues the node.
    """

    def __init__(self, max_connections: int = 100):
        self.max_connections = max_connections
        self._ring = [0] * max_connections
        self._head = 0
        self._count = 0
        self._data = {}
        self._fc = {}
        self._lock = threading.Lock()

    def register(self, nid: int) -> None:
        with self._lock:
            if nid not in self._data:
                if len(self._data) >= self.max_connections:
                    raise UnknownNode(f"interest table full, cannot add {nid}")
                self._data[nid] = 0
                self._fc[nid] = 0

    def unregister(self, nid: int) -> None:
        with self._lock:
            self._data.pop(nid, None)
            self._fc.pop(nid, None)
            if self._count:
                live = [n for n in self._snapshot_locked() if n != nid]
                self._ring[:len(live)] = live
                self._head = 0
                self._count = len(live)

    def _signal(self, counters, others, nid):
        with self._lock:
            try:
                prev = counters[nid]
            except KeyError:
                raise UnknownNode(nid) from None
            if prev < COUNTER_MAX:
                counters[nid] = prev + 1
            if prev == 0 and others[nid] == 0:
                self._ring[(self._head + self._count) % self.max_connections] = nid
                self._count += 1

    def signal_data(self, nid: int) -> None:
        self._signal(self._data, self._fc, nid)

    def signal_fc(self, nid: int) -> None:
        self._signal(self._fc, self._data, nid)

    def next_interest(self):
        """Pop the oldest node; returns ``(nid, data_count, fc_count)`` or None."""
        with self._lock:
            if not self._count:
                return None
            nid = self._ring[self._head]
            self._head = (self._head + 1) % self.max_connections
            self._count -= 1
            data, fc = self._data[nid], self._fc[nid]
            self._data[nid] = 0
            self._fc[nid] = 0
            return nid, data, fc

    def __len__(self):
        return self._count

    def _snapshot_locked(self):
        m = self.max_connections
        return [self._ring[(self._head + i) % m] for i in range(self._count)]

    def queued(self) -> list:
        with self._lock:
            return self._snapshot_locked()

    def counters(self, nid: int) -> tuple:
        with self._lock:
            return self._data[nid], self._fc[nid]
