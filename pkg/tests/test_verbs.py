import time

import pytest

from dxnet.errors import ConnectFailed, QpNotConnected, SrqFull
from dxnet.verbs import (CompletionQueue, LoopbackFabric, Opcode, SharedReceiveQueue,
                         WCStatus, WorkRequest, chain, pack_immediate, unpack_immediate)
from helpers import SGE, close_pair, make_trace, qp_pair, run_trace

BACKENDS = ["loopback", "tcp"]


def wait_for(cq, n, timeout=5.0):
    out = []
    deadline = time.monotonic() + timeout
    while len(out) < n and time.monotonic() < deadline:
        out += cq.poll(n - len(out))
        time.sleep(0)
    return out


def recv_wrs(n, sges=4, size=SGE, first_id=1000):
    return chain([WorkRequest(first_id + i, [memoryview(bytearray(size)) for _ in range(sges)])
                  for i in range(n)])


def test_immediate_layout():
    imm = pack_immediate(3, 0x0102)
    assert imm.to_bytes(4, "little") == bytes([3, 0x02, 0x01, 0])
    assert unpack_immediate(imm) == (3, 0x0102)
    with pytest.raises(ValueError):
        pack_immediate(128, 1)


@pytest.mark.parametrize("kind", BACKENDS)
def test_post_chain_respects_sq_depth(kind):
    ends = qp_pair(kind, sq_depth=20)
    try:
        (_, scq, _, _, qa), (_, _, rcq, srq, _) = ends
        srq.post_recv_chain(recv_wrs(10))
        assert qa.post_send_chain(chain([WorkRequest(i, [b"x"]) for i in range(3)])) == 3
        wait_for(scq, 3)
        qa.sq_used = 18
        assert qa.post_send_chain(chain([WorkRequest(i, [b"y"]) for i in range(5)])) == 2
    finally:
        close_pair(ends)


@pytest.mark.parametrize("kind", BACKENDS)
def test_zero_sge_wr_carries_immediate(kind):
    ends = qp_pair(kind)
    try:
        (_, scq, _, _, qa), (_, _, rcq, srq, qb) = ends
        srq.post_recv_chain(recv_wrs(1))
        qa.post_send_chain(WorkRequest(1, [], pack_immediate(5, 9)))
        (wc,) = wait_for(rcq, 1)
        assert wc.byte_len == 0 and unpack_immediate(wc.immediate) == (5, 9)
        assert wc.opcode is Opcode.RECV and wc.qp_token == qb.token
        (sc,) = wait_for(scq, 1)
        assert sc.status is WCStatus.OK and sc.qp_token == qa.token
    finally:
        close_pair(ends)


@pytest.mark.parametrize("kind", BACKENDS)
def test_scatter_across_sges(kind):
    size = 16
    ends = qp_pair(kind)
    try:
        (_, scq, _, _, qa), (_, _, rcq, srq, _) = ends
        sges = [memoryview(bytearray(size)) for _ in range(4)]
        srq.post_recv_chain(WorkRequest(7, sges))
        payload = bytes(range(3 * size + 1))
        qa.post_send_chain(WorkRequest(1, [payload[:20], payload[20:]]))
        (wc,) = wait_for(rcq, 1)
        assert wc.byte_len == 3 * size + 1
        assert b"".join(bytes(s) for s in sges)[:wc.byte_len] == payload
        assert bytes(sges[3][1:]) == bytes(size - 1)
    finally:
        close_pair(ends)


def test_srq_fill_and_full():
    srq = SharedReceiveQueue(2000)
    assert srq.post_recv_chain(recv_wrs(2000, sges=1, size=1)) == 2000
    with pytest.raises(SrqFull):
        srq.post_recv_chain(recv_wrs(1, sges=1, size=1))


def test_poll_cq():
    cq = CompletionQueue()
    assert cq.poll(8) == []
    ends = qp_pair("loopback")
    try:
        (_, scq, _, _, qa), (_, _, _, srq, _) = ends
        srq.post_recv_chain(recv_wrs(3))
        qa.post_send_chain(chain([WorkRequest(i, [b"a"]) for i in range(3)]))
        first = scq.poll(2)
        rest = scq.poll(8)
        assert len(first) == 2 and len(rest) == 1
        assert [w.wr_id for w in first + rest] == [0, 1, 2]
        assert qa.sq_used == 0
    finally:
        close_pair(ends)


def test_shared_cq_attributes_qp_tokens():
    fabric = LoopbackFabric()
    d = fabric.create_device()
    scq, rcq, srq = CompletionQueue(), CompletionQueue(), SharedReceiveQueue(16)
    peer_rcq, peer_srq = CompletionQueue(), SharedReceiveQueue(16)
    peer_dev = fabric.create_device()
    qps = [d.create_qp(scq, rcq, srq) for _ in range(3)]
    peers = [peer_dev.create_qp(CompletionQueue(), peer_rcq, peer_srq) for _ in range(3)]
    for q, p in zip(qps, peers):
        q.connect(p.token)
        p.connect(q.token)
    peer_srq.post_recv_chain(recv_wrs(6))
    for i, q in enumerate(qps):
        q.post_send_chain(chain([WorkRequest(10 * i + j, [b"z"]) for j in range(2)]))
    by_token = {}
    for wc in scq.poll(16):
        by_token.setdefault(wc.qp_token, []).append(wc.wr_id)
    assert by_token == {q.token: [10 * i, 10 * i + 1] for i, q in enumerate(qps)}
    recv_tokens = sorted(w.qp_token for w in peer_rcq.poll(16))
    assert recv_tokens == sorted(p.token for p in peers for _ in range(2))


@pytest.mark.parametrize("kind", BACKENDS)
def test_connect_twice_and_unconnected(kind):
    ends = qp_pair(kind)
    try:
        (dev, scq, rcq, srq, qa), _ = ends
        with pytest.raises(ConnectFailed):
            qa.connect(123, None)
        fresh = dev.create_qp(scq, rcq, srq)
        with pytest.raises(QpNotConnected):
            fresh.post_send_chain(WorkRequest(1, [b"x"]))
        fresh.close()
    finally:
        close_pair(ends)


def test_loopback_stalls_instead_of_dropping():
    ends = qp_pair("loopback")
    try:
        (_, scq, _, _, qa), (_, _, rcq, srq, _) = ends
        qa.post_send_chain(chain([WorkRequest(i, [bytes([i])]) for i in range(3)]))
        assert rcq.poll(8) == [] and scq.poll(8) == []
        srq.post_recv_chain(recv_wrs(3))
        assert [w.byte_len for w in rcq.poll(8)] == [1, 1, 1]
        assert len(scq.poll(8)) == 3
    finally:
        close_pair(ends)


@pytest.mark.parametrize("kind", BACKENDS)
def test_close_flushes_and_notifies(kind):
    ends = qp_pair(kind)
    (da, scq, _, _, qa), (db, _, _, _, qb) = ends
    lost = []
    da.on_disconnect = lost.append
    qb.close()
    deadline = time.monotonic() + 5
    while not lost and time.monotonic() < deadline:
        time.sleep(0.01)
    assert lost == [qa]
    close_pair(ends)


def test_backends_equivalent_on_small_trace():
    trace = make_trace(500, seed=3)
    lo = run_trace("loopback", trace)
    tcp = run_trace("tcp", trace)
    assert lo["sends"] == tcp["sends"]
    assert lo["recvs"] == tcp["recvs"]
    assert lo["payloads"] == tcp["payloads"] == [p for p, _ in trace]
    assert [s[0] for s in lo["sends"]] == list(range(len(trace)))
    assert max(lo["max_sq_used"], tcp["max_sq_used"]) <= 20
