"""Shared drivers for the verbs equivalence tests."""

import random
import time

from dxnet.verbs import (CompletionQueue, LoopbackFabric, SharedReceiveQueue, TcpDevice,
                         WorkRequest, chain)

SGE = 1024
SGES = 4


def qp_pair(kind, sq_depth=20, srq_depth=64):
    if kind == "loopback":
        fabric = LoopbackFabric()
        devs = [fabric.create_device(), fabric.create_device()]
    else:
        devs = [TcpDevice(), TcpDevice()]
    ends = []
    for d in devs:
        scq, rcq, srq = CompletionQueue(), CompletionQueue(), SharedReceiveQueue(srq_depth)
        ends.append((d, scq, rcq, srq, d.create_qp(scq, rcq, srq, sq_depth)))
    (da, *_, qa), (db, *_, qb) = ends
    qb.connect(qa.token, None)
    qa.connect(qb.token, db.endpoint)
    return ends


def close_pair(ends):
    for d, *_, qp in ends:
        qp.close()
        d.close()


def make_trace(n, seed=0, max_len=SGE * SGES):
    rnd = random.Random(seed)
    out = []
    for i in range(n):
        size = rnd.choice([0, 1, rnd.randint(0, max_len), max_len])
        out.append((rnd.randbytes(size), rnd.getrandbits(32)))
    return out


def run_trace(kind, trace, timeout=60.0):
    """Post ``trace`` from A to B; returns the observable completion sequences."""
    ends = qp_pair(kind)
    try:
        (_, a_scq, _, _, qa), (_, _, b_rcq, b_srq, qb) = ends
        bufs = {}
        next_id = [1]

        def refill():
            wrs = []
            while b_srq.pending + len(wrs) < b_srq.depth:
                sges = [memoryview(bytearray(SGE)) for _ in range(SGES)]
                wid = next_id[0]
                next_id[0] += 1
                bufs[wid] = sges
                wrs.append(WorkRequest(wid, sges))
            if wrs:
                b_srq.post_recv_chain(chain(wrs))

        refill()
        sends, recvs, payloads = [], [], []
        max_used = 0
        pos = 0
        deadline = time.monotonic() + timeout
        while len(recvs) < len(trace) or len(sends) < len(trace):
            if time.monotonic() > deadline:
                raise TimeoutError(f"{kind}: {len(sends)} sends, {len(recvs)} recvs")
            if pos < len(trace) and qa.sq_free():
                batch = trace[pos:pos + qa.sq_free()]
                wrs = [WorkRequest(pos + i, [memoryview(p)] if p else [], imm)
                       for i, (p, imm) in enumerate(batch)]
                pos += qa.post_send_chain(chain(wrs))
                max_used = max(max_used, qa.sq_used)
            for wc in a_scq.poll(8):
                sends.append((wc.wr_id, wc.byte_len, wc.immediate, wc.status.name))
            for wc in b_rcq.poll(16):
                sges = bufs.pop(wc.wr_id)
                data = b"".join(bytes(s) for s in sges)[:wc.byte_len]
                recvs.append((wc.byte_len, wc.immediate, wc.status.name))
                payloads.append(data)
            refill()
            time.sleep(0)
        return {"sends": sends, "recvs": recvs, "payloads": payloads, "max_sq_used": max_used}
    finally:
        close_pair(ends)
