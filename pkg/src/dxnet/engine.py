"""Messaging engine over reliable queue pairs.

One send thread and one receive thread drive the verbs layer.  The
transport above plugs in through two callbacks:

``get_next_data_to_send(prev_results, completed) -> NextWorkPackage | None``
    pulls the next ready-to-send range and learns what the previous call
    managed to post and which sends have completed since.
``received(irb) -> int``
    is handed the incoming ring buffer and returns how many entries it
    consumed (possibly none).  Consumed buffers are given back later,
    from any thread, with :meth:`Engine.return_buffer`.
"""

from __future__ import annotations

import enum
import itertools
import logging
import threading
from collections import deque
from dataclasses import dataclass, field

from .config import EngineConfig
from .counters import Counters
from .errors import DoubleReturn, QpNotConnected
from .model import INVALID_NID
from .parking import ParkingState, park_step, perform
from .verbs import (CompletionQueue, SharedReceiveQueue, WCStatus, WorkRequest, chain,
                    pack_immediate, unpack_immediate)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# exchange structures


@dataclass
class NextWorkPackage:
    pos_back_rel: int
    pos_front_rel: int
    flow_control_data: int
    node_id: int
    # bytes in the range; disambiguates a completely full ring
    length: int = 0


@dataclass
class PrevWorkPackageResults:
    node_id: int = INVALID_NID
    num_bytes_posted: int = 0
    num_bytes_not_posted: int = 0
    fc_data_posted: int = 0
    fc_data_not_posted: int = 0

    def reset(self):
        self.node_id = INVALID_NID
        self.num_bytes_posted = self.num_bytes_not_posted = 0
        self.fc_data_posted = self.fc_data_not_posted = 0


@dataclass
class CompletedWorkList:
    bytes_written: dict = field(default_factory=dict)
    fc_data_written: dict = field(default_factory=dict)
    node_ids: list = field(default_factory=list)

    @property
    def num_nodes(self):
        return len(self.node_ids)

    def add(self, nid, nbytes, fc):
        if nid not in self.bytes_written:
            self.node_ids.append(nid)
            self.bytes_written[nid] = 0
            self.fc_data_written[nid] = 0
        self.bytes_written[nid] += nbytes
        self.fc_data_written[nid] += fc

    def reset(self):
        self.bytes_written.clear()
        self.fc_data_written.clear()
        self.node_ids.clear()


# --------------------------------------------------------------------------
# receive buffers


class BufferState(enum.IntEnum):
    POOLED = 0
    POSTED = 1
    IRB = 2
    LEASED = 3


class RecvBuffer:
    __slots__ = ("index", "data", "view", "state")

    def __init__(self, index, size):
        self.index = index
        self.data = bytearray(size)
        self.view = memoryview(self.data)
        self.state = BufferState.POOLED

    def __repr__(self):
        return f"RecvBuffer({self.index}, {self.state.name})"


class RecvBufferPool:
    """Fixed set of equally sized buffers; every buffer has exactly one state."""

    def __init__(self, count: int, size: int):
        self.size = size
        self.buffers = [RecvBuffer(i, size) for i in range(count)]
        self._free = deque(self.buffers)
        self._counts = [count, 0, 0, 0]
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.buffers)

    @property
    def available(self) -> int:
        return len(self._free)

    def take(self, n: int) -> list:
        """Move ``n`` pooled buffers to POSTED; empty list if fewer are free."""
        with self._lock:
            if len(self._free) < n:
                return []
            pop = self._free.popleft
            bufs = [pop() for _ in range(n)]
            for b in bufs:
                b.state = BufferState.POSTED
            self._counts[BufferState.POOLED] -= n
            self._counts[BufferState.POSTED] += n
            return bufs

    def move(self, bufs, src: BufferState, dst: BufferState) -> None:
        with self._lock:
            for b in bufs:
                if b.state is not src:
                    raise RuntimeError(f"{b!r} expected in state {src.name}")
                b.state = dst
            self._counts[src] -= len(bufs)
            self._counts[dst] += len(bufs)
            if dst is BufferState.POOLED:
                self._free.extend(bufs)

    def give_back(self, buf: RecvBuffer) -> None:
        with self._lock:
            if buf.state is not BufferState.LEASED:
                raise DoubleReturn(f"{buf!r} is not leased")
            buf.state = BufferState.POOLED
            self._counts[BufferState.LEASED] -= 1
            self._counts[BufferState.POOLED] += 1
            self._free.append(buf)

    def counts(self) -> dict:
        with self._lock:
            return {s.name.lower(): self._counts[s] for s in BufferState}

    def check_conservation(self) -> None:
        with self._lock:
            by_state = [0, 0, 0, 0]
            for b in self.buffers:
                by_state[b.state] += 1
            assert by_state == self._counts, (by_state, self._counts)
            assert sum(by_state) == len(self.buffers)


@dataclass
class IrbEntry:
    source_node_id: int
    fc_data: int
    data_length: int
    buffer: RecvBuffer | None


class IncomingRingBuffer:
    """Bounded FIFO of received buffers awaiting dispatch."""

    def __init__(self, size: int):
        self.size = size
        self._entries = deque()

    def __len__(self):
        return len(self._entries)

    @property
    def used_entries(self) -> int:
        return len(self._entries)

    @property
    def free(self) -> int:
        return self.size - len(self._entries)

    def push(self, entry: IrbEntry) -> None:
        if len(self._entries) >= self.size:
            raise OverflowError("incoming ring buffer full")
        self._entries.append(entry)

    def __iter__(self):
        return iter(self._entries)

    def __getitem__(self, i):
        return self._entries[i]

    def pop_front(self, n: int) -> list:
        pop = self._entries.popleft
        return [pop() for _ in range(n)]


# --------------------------------------------------------------------------
# pure helpers


def slice_into_wrs(segments, fc_windows: int, src_nid: int, max_transfer: int) -> list:
    """Cut a ready-to-send range into send WRs of at most ``max_transfer`` bytes.

    ``segments`` holds one or two buffer views (two when the range wraps the
    ring).  Flow control windows ride in the first WR only; an empty range
    with pending windows yields a single WR without SGEs.
    """
    wrs = []
    cur, cur_len = [], 0
    for seg in segments:
        pos, n = 0, len(seg)
        while pos < n:
            k = min(n - pos, max_transfer - cur_len)
            cur.append(seg[pos:pos + k])
            cur_len += k
            pos += k
            if cur_len == max_transfer:
                wrs.append(cur)
                cur, cur_len = [], 0
    if cur:
        wrs.append(cur)
    if not wrs:
        if fc_windows:
            return [WorkRequest(0, (), pack_immediate(fc_windows, src_nid))]
        return []
    out = [WorkRequest(0, wrs[0], pack_immediate(fc_windows, src_nid))]
    imm = pack_immediate(0, src_nid)
    out.extend(WorkRequest(0, sges, imm) for sges in wrs[1:])
    return out


def fragment_split(byte_len: int, buffer_size: int, sges_per_wr: int) -> tuple:
    """(buffers holding data, untouched buffers) for one receive completion."""
    filled = -(-byte_len // buffer_size)
    if filled > sges_per_wr:
        raise ValueError(f"{byte_len} bytes exceed {sges_per_wr} x {buffer_size}")
    return filled, sges_per_wr - filled


# --------------------------------------------------------------------------


class Engine:
    def __init__(self, config: EngineConfig, node_id: int, device, *, get_connection,
                 get_next_data_to_send, received, on_connection_error=None,
                 counters: Counters | None = None):
        self.config = config
        self.node_id = node_id
        self.device = device
        self.counters = counters if counters is not None else Counters()
        self._get_connection = get_connection
        self._get_next = get_next_data_to_send
        self._received = received
        self._on_error = on_connection_error
        self.max_transfer = config.max_transfer_size

        self.send_cq = CompletionQueue()
        self.recv_cq = CompletionQueue()
        self.srq = SharedReceiveQueue(config.srq_depth)
        self.pool = RecvBufferPool(config.pool_buffers, config.recv_buffer_size)
        self.irb = IncomingRingBuffer(config.irb_size)

        self.prev_results = PrevWorkPackageResults()
        self.completed = CompletedWorkList()
        self._wr_ids = itertools.count(1)
        self._inflight = {}
        self._recv_wrs = {}
        self.send_parking = ParkingState.from_config(config)
        self.recv_parking = ParkingState.from_config(config)
        self._running = False
        self._threads = []
        # poll batch for the send CQ
        self.poll_batch = 64

    def create_qp(self):
        return self.device.create_qp(self.send_cq, self.recv_cq, self.srq, self.config.sq_depth)

    # -- send path -----------------------------------------------------------

    @property
    def outstanding_sends(self) -> int:
        return len(self._inflight)

    def send_loop_iteration(self) -> bool:
        prev, completed = self.prev_results, self.completed
        pkg = self._get_next(prev, completed)
        prev.reset()
        completed.reset()
        work = False
        if pkg is not None:
            conn = self._get_connection(pkg.node_id)
            if conn is not None:
                self.send_data(conn, pkg, prev)
                work = True
        return self.poll_send_completions() or work

    def send_data(self, conn, pkg: NextWorkPackage, prev: PrevWorkPackageResults) -> None:
        prev.node_id = pkg.node_id
        segments = conn.orb.segments(pkg.pos_front_rel, pkg.length) if pkg.length else ()
        wrs = slice_into_wrs(segments, pkg.flow_control_data, self.node_id, self.max_transfer)
        qp = conn.qp
        free = qp.sq_free()
        todo = wrs[:free]
        for wr in todo:
            wr.wr_id = next(self._wr_ids)
        posted = 0
        if todo:
            try:
                posted = qp.post_send_chain(chain(todo))
            except QpNotConnected:
                posted = 0
                if self._on_error is not None:
                    self._on_error(pkg.node_id)
        nbytes = 0
        data_wrs = 0
        inflight = self._inflight
        nid = pkg.node_id
        for i, wr in enumerate(todo[:posted]):
            n = wr.byte_len
            nbytes += n
            if n:
                data_wrs += 1
            inflight[wr.wr_id] = (nid, n, pkg.flow_control_data if i == 0 else 0)
        fc_posted = pkg.flow_control_data if posted else 0
        prev.num_bytes_posted = nbytes
        prev.num_bytes_not_posted = pkg.length - nbytes
        prev.fc_data_posted = fc_posted
        prev.fc_data_not_posted = pkg.flow_control_data - fc_posted
        if posted:
            c = self.counters
            c.add("wrs_posted", posted)
            c.add("data_wrs_posted", data_wrs)
            if fc_posted:
                c.add("fc_windows_sent", fc_posted)
        assert prev.num_bytes_posted + prev.num_bytes_not_posted == pkg.length

    def poll_send_completions(self) -> bool:
        """One non-blocking poll of the send CQ, skipped if nothing is in flight."""
        if not self._inflight:
            return False
        wcs = self.send_cq.poll(self.poll_batch)
        if not wcs:
            self.counters.add("poll_empty_count")
            return False
        self.counters.add("wcs_polled", len(wcs))
        completed = self.completed
        failed = set()
        for wc in wcs:
            nid, nbytes, fc = self._inflight.pop(wc.wr_id)
            if wc.status is WCStatus.OK:
                completed.add(nid, nbytes, fc)
            else:
                failed.add(nid)
        if failed and self._on_error is not None:
            for nid in failed:
                self._on_error(nid)
        return True

    # -- receive path ----------------------------------------------------------

    def recv_loop_iteration(self) -> bool:
        sges = self.config.sges_per_wr
        room = self.irb.free // sges
        wcs = self.recv_cq.poll(room) if room else []
        if wcs:
            self.counters.add("wcs_polled", len(wcs))
        else:
            self.counters.add("poll_empty_count")
        if self.srq.pending < self.srq.depth:
            self.refill()
        if wcs:
            self.process_completions(wcs)
        dispatched = self.dispatch_received() if len(self.irb) else 0
        return bool(wcs) or dispatched > 0

    def refill(self) -> int:
        sges = self.config.sges_per_wr
        want = min(self.srq.depth - self.srq.pending, self.pool.available // sges)
        if want <= 0:
            return 0
        bufs = self.pool.take(want * sges)
        if not bufs:
            return 0
        wrs = []
        for i in range(want):
            group = bufs[i * sges:(i + 1) * sges]
            wr_id = next(self._wr_ids)
            self._recv_wrs[wr_id] = group
            wrs.append(WorkRequest(wr_id, [b.view for b in group]))
        return self.srq.post_recv_chain(chain(wrs))

    def process_completions(self, wcs) -> None:
        size = self.config.recv_buffer_size
        sges = self.config.sges_per_wr
        pool, irb = self.pool, self.irb
        fragments = 0
        for wc in wcs:
            bufs = self._recv_wrs.pop(wc.wr_id)
            fc, nid = unpack_immediate(wc.immediate)
            if wc.status is not WCStatus.OK:
                pool.move(bufs, BufferState.POSTED, BufferState.POOLED)
                continue
            filled, _ = fragment_split(wc.byte_len, size, sges)
            if filled < len(bufs):
                pool.move(bufs[filled:], BufferState.POSTED, BufferState.POOLED)
                fragments += len(bufs) - filled
            if filled == 0:
                irb.push(IrbEntry(nid, fc, 0, None))
                continue
            data = bufs[:filled]
            pool.move(data, BufferState.POSTED, BufferState.IRB)
            remaining = wc.byte_len
            for i, buf in enumerate(data):
                n = min(size, remaining)
                irb.push(IrbEntry(nid, fc if i == 0 else 0, n, buf))
                remaining -= n
        if fragments:
            self.counters.add("buffers_fragment_returned", fragments)

    def dispatch_received(self) -> int:
        irb, pool = self.irb, self.pool
        held = [e.buffer for e in irb if e.buffer is not None]
        # leased before the callback so a fast consumer may return them at once
        pool.move(held, BufferState.IRB, BufferState.LEASED)
        try:
            consumed = self._received(irb)
        except Exception:
            log.exception("receive callback failed")
            consumed = 0
        if not 0 <= consumed <= len(irb):
            raise ValueError(f"callback consumed {consumed} of {len(irb)} entries")
        irb.pop_front(consumed)
        rest = [e.buffer for e in irb if e.buffer is not None]
        if rest:
            pool.move(rest, BufferState.LEASED, BufferState.IRB)
        return consumed

    def return_buffer(self, buf: RecvBuffer) -> None:
        self.pool.give_back(buf)

    def buffer_counts(self) -> dict:
        return self.pool.counts()

    # -- threads -------------------------------------------------------------

    def start(self) -> None:
        if self._running:
            return
        self._running = True
        self.refill()
        for target, name in ((self._send_main, "send"), (self._recv_main, "recv")):
            t = threading.Thread(target=target, name=f"engine-{name}-{self.node_id}", daemon=True)
            t.start()
            self._threads.append(t)

    def _loop(self, iteration, parking):
        counters = self.counters
        while self._running:
            try:
                work = iteration()
            except Exception:
                log.exception("engine loop iteration failed")
                work = False
            before = parking.transitions
            action = park_step(parking, work)
            if parking.transitions != before:
                counters.add("park_transitions", parking.transitions - before)
            perform(action, parking, work)

    def _send_main(self):
        self._loop(self.send_loop_iteration, self.send_parking)

    def _recv_main(self):
        self._loop(self.recv_loop_iteration, self.recv_parking)

    def stop(self) -> None:
        self._running = False
        for t in self._threads:
            t.join(timeout=5)
        self._threads.clear()

    def release_receive_queue(self) -> None:
        """After stop: pull posted receive WRs and undispatched IRB entries back into the pool."""
        self.srq.close()
        self.srq.drain()
        groups = list(self._recv_wrs.values())
        self._recv_wrs.clear()
        for group in groups:
            self.pool.move(group, BufferState.POSTED, BufferState.POOLED)
        held = [e.buffer for e in self.irb.pop_front(len(self.irb)) if e.buffer is not None]
        self.pool.move(held, BufferState.IRB, BufferState.POOLED)
