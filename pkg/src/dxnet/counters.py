"""Monotonic observability counters shared by the modules of one node."""

from __future__ import annotations

import threading
from dataclasses import dataclass, fields


@dataclass(frozen=True)
class CounterSet:
    bytes_sent: int = 0
    bytes_confirmed: int = 0
    messages_sent: int = 0
    messages_received: int = 0
    fc_windows_sent: int = 0
    fc_windows_received: int = 0
    wrs_posted: int = 0
    data_wrs_posted: int = 0
    wcs_polled: int = 0
    poll_empty_count: int = 0
    buffers_fragment_returned: int = 0
    ibq_backpressure_events: int = 0
    park_transitions: int = 0
    late_responses: int = 0
    exchange_requests_sent: int = 0
    entries_dropped: int = 0


COUNTER_NAMES = tuple(f.name for f in fields(CounterSet))


class Counters:
    """Thread-safe increments; :meth:`snapshot` returns a consistent copy."""

    def __init__(self):
        self._values = dict.fromkeys(COUNTER_NAMES, 0)
        self._lock = threading.Lock()

    def add(self, name: str, n: int = 1) -> None:
        with self._lock:
            self._values[name] += n

    def get(self, name: str) -> int:
        return self._values[name]

    def snapshot(self) -> CounterSet:
        with self._lock:
            return CounterSet(**self._values)


def snapshot_counters(counters: Counters) -> CounterSet:
    return counters.snapshot()
