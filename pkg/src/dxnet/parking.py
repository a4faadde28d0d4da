"""Load adaptive thread parking: busy -> yield -> park on idle, reset on work."""

from __future__ import annotations

import enum
import os
import threading
import time
from dataclasses import dataclass


class Phase(enum.IntEnum):
    BUSY = 0
    YIELD = 1
    PARK = 2


class Action(enum.IntEnum):
    SPIN = 0
    YIELD = 1
    PARK = 2


@dataclass
class ParkingState:
    yield_after: float = 0.1
    park_after: float = 1.0
    park_quantum: float = 1e-9
    phase: Phase = Phase.BUSY
    idle_since: float | None = None
    # monotonic time of the last phase change
    phase_since: float | None = None
    transitions: int = 0

    @classmethod
    def from_config(cls, engine_cfg):
        return cls(engine_cfg.yield_after_ms / 1e3, engine_cfg.park_after_ms / 1e3,
                   engine_cfg.park_quantum_ns / 1e9)


def park_step(state: ParkingState, had_work: bool, now: float | None = None) -> Action:
    """Advance the idle timer and return what the loop should do this round."""
    if now is None:
        now = time.monotonic()
    if had_work:
        if state.phase is not Phase.BUSY:
            state.transitions += 1
            state.phase = Phase.BUSY
            state.phase_since = now
        state.idle_since = None
        return Action.SPIN
    if state.idle_since is None:
        state.idle_since = now
    idle = now - state.idle_since
    if idle >= state.yield_after + state.park_after:
        phase = Phase.PARK
    elif idle >= state.yield_after:
        phase = Phase.YIELD
    else:
        phase = Phase.BUSY
    if phase is not state.phase:
        state.transitions += 1
        state.phase = phase
        state.phase_since = now
    return Action(phase)


def perform(action: Action, state: ParkingState, had_work: bool) -> None:
    """Carry out ``action`` in the calling thread.

    An idle spin still drops the interpreter lock for a moment so the
    application threads feeding the loop are not starved.
    """
    if action is Action.SPIN:
        if not had_work:
            os.sched_yield()
    elif action is Action.YIELD:
        os.sched_yield()
    else:
        time.sleep(state.park_quantum)


class YieldingLock:
    """Mutex whose contended acquire yields the CPU before it blocks.

    A thread blocked in the kernel stops competing for the interpreter lock,
    so a holder preempted inside a short critical section turns the other
    producers into a convoy.  Yielding keeps waiters runnable for the few
    scheduler rounds such sections normally take.
    """

    __slots__ = ("_lock", "_spins", "locked")

    def __init__(self, spins: int = 32):
        self._lock = threading.Lock()
        self._spins = spins
        self.locked = self._lock.locked

    def acquire(self, blocking: bool = True, timeout: float = -1) -> bool:
        lock = self._lock
        if lock.acquire(False):
            return True
        if not blocking:
            return False
        for _ in range(self._spins):
            os.sched_yield()
            if lock.acquire(False):
                return True
        return lock.acquire(True, timeout)

    def release(self) -> None:
        self._lock.release()

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self._lock.release()
