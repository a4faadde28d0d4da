import random
import threading
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from dxnet.errors import UnknownNode
from dxnet.wim import COUNTER_MAX, WriteInterestManager


def make(*nids, cap=100):
    w = WriteInterestManager(cap)
    for n in nids:
        w.register(n)
    return w


def test_single_signal():
    w = make(4)
    w.signal_data(4)
    assert w.queued() == [4]
    assert w.counters(4) == (1, 0)


def test_concurrent_signals_enqueue_once():
    w = make(9)

    def spam():
        for _ in range(125):
            w.signal_data(9)

    ts = [threading.Thread(target=spam) for _ in range(8)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert w.queued() == [9]
    assert w.counters(9) == (1000, 0)


def test_fifo_order():
    w = make(2, 3)
    w.signal_data(3)
    w.signal_data(2)
    assert w.queued() == [3, 2]


def test_fc_only_and_mixed():
    w = make(1, 2)
    w.signal_fc(1)
    assert w.queued() == [1]
    w.signal_data(2)
    w.signal_fc(2)
    w.signal_data(1)
    assert w.queued() == [1, 2]
    assert w.next_interest() == (1, 1, 1)
    assert w.next_interest() == (2, 1, 1)


def test_next_interest():
    w = make(5)
    assert w.next_interest() is None
    for _ in range(3):
        w.signal_data(5)
    assert w.next_interest() == (5, 3, 0)
    assert w.next_interest() is None
    w.signal_data(5)
    assert w.queued() == [5]


def test_unknown_node():
    w = make(1)
    with pytest.raises(UnknownNode):
        w.signal_data(2)


def test_unregister_removes_queued():
    w = make(1, 2, 3)
    for n in (1, 2, 3):
        w.signal_data(n)
    w.unregister(2)
    assert w.queued() == [1, 3]


def test_counter_saturates():
    w = make(1)
    w._data[1] = COUNTER_MAX
    w.signal_data(1)
    assert w.counters(1)[0] == COUNTER_MAX


@given(st.lists(st.tuples(st.sampled_from("dfn"), st.integers(0, 7)), max_size=300))
def test_interleavings_match_model(ops):
    """Model: a set ordered by insertion plus two counters per node."""
    w = make(*range(8), cap=8)
    ring, data, fc = [], Counter(), Counter()
    for op, nid in ops:
        if op == "n":
            got = w.next_interest()
            if not ring:
                assert got is None
                continue
            n = ring.pop(0)
            assert got == (n, data.pop(n, 0), fc.pop(n, 0))
        else:
            if data[nid] == 0 and fc[nid] == 0:
                ring.append(nid)
            (data if op == "d" else fc)[nid] += 1
            (w.signal_data if op == "d" else w.signal_fc)(nid)
        assert w.queued() == ring
        assert len(set(w.queued())) == len(w.queued())


def test_round_robin_gap_under_continuous_signaling():
    k = 16
    w = make(*range(k), cap=k)
    for n in range(k):
        w.signal_data(n)
    last = {}
    for step in range(10 * k):
        nid, _, _ = w.next_interest()
        if nid in last:
            assert step - last[nid] - 1 <= k - 1
        last[nid] = step
        w.signal_data(nid)
        w.signal_data(random.randrange(k))
