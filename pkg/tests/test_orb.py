import random
import threading

import pytest
from hypothesis import given, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from dxnet.errors import DoubleCommit, InvalidSize, OverAdvance, SendTimeout, WouldBlock
from dxnet.orb import OutgoingRingBuffer

KiB = 1024


def test_reserve_on_empty_ring():
    orb = OutgoingRingBuffer(4 * KiB)
    res = orb.reserve(80)
    assert res.start == 0
    assert [len(s) for s in res.segments] == [80]


def test_reserve_wraps_into_two_segments():
    cap = 4 * KiB
    orb = OutgoingRingBuffer(cap)
    r = orb.reserve(cap - 8)
    orb.commit(r)
    orb.advance_posted(cap - 8)
    orb.advance_confirmed(cap - 8)
    res = orb.reserve(16)
    a, b = res.segments
    assert len(a) == 8 and len(b) == 8
    res.segments[0][:] = b"A" * 8
    res.segments[1][:] = b"B" * 8
    assert orb.storage[cap - 8:] == b"A" * 8 and orb.storage[:8] == b"B" * 8


def test_reserve_errors():
    orb = OutgoingRingBuffer(1024)
    with pytest.raises(InvalidSize):
        orb.reserve(1025)
    with pytest.raises(InvalidSize):
        orb.reserve(0)
    orb.reserve(1000)
    with pytest.raises(WouldBlock):
        orb.reserve(100)
    with pytest.raises(SendTimeout):
        orb.reserve_blocking(100, timeout=0.01)


def test_capacity_must_be_power_of_two():
    with pytest.raises(ValueError):
        OutgoingRingBuffer(1000)


def test_double_commit():
    orb = OutgoingRingBuffer(1024)
    r = orb.reserve(10)
    orb.commit(r)
    with pytest.raises(DoubleCommit):
        orb.commit(r)


def test_snapshot_after_commit_and_post():
    orb = OutgoingRingBuffer(4 * KiB)
    assert orb.snapshot_ready()[0] == orb.snapshot_ready()[1]
    orb.commit(orb.reserve(80))
    assert orb.snapshot_ready() == (0, 80)
    orb.commit(orb.reserve(64))
    orb.advance_posted(80)
    assert orb.snapshot_ready() == (80, 144)
    assert orb.ready() == (80, 144, 64)


def test_out_of_order_commit_invisible_until_gap_closes():
    orb = OutgoingRingBuffer(4 * KiB)
    a = orb.reserve(10)
    b = orb.reserve(20)
    orb.commit(b)
    assert orb.ready_length() == 0
    orb.commit(a)
    assert orb.snapshot_ready() == (0, 30)


def test_advance_edge_cases():
    orb = OutgoingRingBuffer(1024)
    orb.advance_posted(0)
    orb.advance_confirmed(0)
    orb.commit(orb.reserve(100))
    with pytest.raises(OverAdvance):
        orb.advance_posted(101)
    orb.advance_posted(100)
    assert orb.ready_length() == 0
    with pytest.raises(OverAdvance):
        orb.advance_confirmed(101)
    orb.advance_confirmed(100)
    assert orb.free_bytes() == 1024 - (orb.back - orb.front)


def test_blocked_reserve_wakes_on_confirm():
    orb = OutgoingRingBuffer(1024)
    orb.commit(orb.reserve(1000))
    got = []
    t = threading.Thread(target=lambda: got.append(orb.reserve_blocking(100, timeout=5)))
    t.start()
    orb.advance_posted(1000)
    orb.advance_confirmed(1000)
    t.join(5)
    assert got and got[0].start == 1000


@given(st.lists(st.integers(1, 200), min_size=1, max_size=100), st.randoms())
def test_commit_interleavings_linearize(sizes, rnd):
    """Consumer stream equals the concatenation of payloads in reservation order."""
    orb = OutgoingRingBuffer(32 * KiB)
    res = []
    for i, n in enumerate(sizes):
        r = orb.reserve(n)
        data = bytes([i % 251]) * n
        pos = 0
        for seg in r.segments:
            seg[:] = data[pos:pos + len(seg)]
            pos += len(seg)
        res.append(r)
    order = list(res)
    rnd.shuffle(order)
    out = bytearray()
    for r in order:
        orb.commit(r)
        front, _, length = orb.ready()
        for seg in orb.segments(front, length):
            out += seg
        orb.advance_posted(length)
        orb.check_invariants()
    assert bytes(out) == b"".join(bytes([i % 251]) * n for i, n in enumerate(sizes))


class OrbReplay(RuleBasedStateMachine):
    """Three-pointer replay model checked against the ring after each step."""

    def __init__(self):
        super().__init__()
        self.orb = OutgoingRingBuffer(256)
        self.front = self.posted = self.back = self.reserved = 0
        self.open = []

    @rule(n=st.integers(1, 300))
    def reserve(self, n):
        if n > 256:
            with pytest.raises(InvalidSize):
                self.orb.reserve(n)
        elif self.reserved + n - self.front > 256:
            with pytest.raises(WouldBlock):
                self.orb.reserve(n)
        else:
            self.open.append(self.orb.reserve(n))
            self.reserved += n

    @precondition(lambda self: self.open)
    @rule(data=st.data())
    def commit(self, data):
        r = self.open.pop(data.draw(st.integers(0, len(self.open) - 1)))
        self.orb.commit(r)
        pending = sorted((x.start, x.start + x.size) for x in self.open)
        self.back = pending[0][0] if pending else self.reserved

    @rule(data=st.data())
    def post(self, data):
        n = data.draw(st.integers(0, self.back - self.posted))
        self.orb.advance_posted(n)
        self.posted += n

    @rule(data=st.data())
    def confirm(self, data):
        n = data.draw(st.integers(0, self.posted - self.front))
        self.orb.advance_confirmed(n)
        self.front += n

    @invariant()
    def pointers_match(self):
        orb = self.orb
        assert (orb.front, orb.front_posted, orb.back, orb.reserved) == \
            (self.front, self.posted, self.back, self.reserved)
        assert self.front <= self.posted <= self.back <= self.reserved <= self.front + 256
        orb.check_invariants()


TestOrbReplay = OrbReplay.TestCase


def test_concurrent_reservations_are_disjoint():
    orb = OutgoingRingBuffer(1 << 22)
    grants = [[] for _ in range(8)]

    def worker(i):
        rnd = random.Random(i)
        for _ in range(10_000):
            grants[i].append(orb.reserve(rnd.randint(1, 48)))

    ts = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    spans = sorted((r.start, r.start + r.size) for g in grants for r in g)
    total = sum(r.size for g in grants for r in g)
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
    assert spans[0][0] == 0 and spans[-1][1] == total
