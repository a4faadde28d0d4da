"""Emulated messaging verbs: reliable queue pairs over loopback or TCP.

Reproduces the parts of ibverbs semantics the engine relies on:

* a send queue of bounded depth per QP; a slot is held from posting until
  the send completion has been polled,
* one shared receive queue (SRQ) consumed strictly FIFO; incoming data with
  no receive WR available stalls (never dropped),
* shared completion queues polled in batches without blocking,
* scatter/gather lists, chained posting and 4 bytes of immediate data.

Send completions are produced once the payload has been handed to the
remote (loopback: scattered into a receive WR; TCP: written to the socket).

TCP frame per work request: ``[totalLen:4][immediate:4][payload]`` little
endian, where ``totalLen`` counts the whole frame including its 8 header
bytes.  A freshly dialled socket first carries ``[srcToken:8][dstToken:8]``.
"""

from __future__ import annotations

import enum
import itertools
import logging
import random
import socket
import struct
import threading
from collections import deque
from typing import NamedTuple

from .errors import ConnectFailed, QpNotConnected, SrqFull

log = logging.getLogger(__name__)

FRAME = struct.Struct("<II")
HANDSHAKE = struct.Struct("<QQ")
DEFAULT_SQ_DEPTH = 20
DEFAULT_SRQ_DEPTH = 2000


def pack_immediate(fc_windows: int, src_nid: int) -> int:
    """byte 0 = fc windows, bytes 1-2 = source node id (LE), byte 3 = 0."""
    if not 0 <= fc_windows < 128:
        raise ValueError(f"fc windows out of range: {fc_windows}")
    return fc_windows | (src_nid & 0xFFFF) << 8


def unpack_immediate(imm: int) -> tuple:
    return imm & 0xFF, (imm >> 8) & 0xFFFF


class WCStatus(enum.IntEnum):
    OK = 0
    FLUSH_ERR = 1
    REMOTE_DISCONNECT = 2


class Opcode(enum.IntEnum):
    SEND = 0
    RECV = 1


class WorkCompletion(NamedTuple):
    wr_id: int
    status: WCStatus
    byte_len: int
    immediate: int
    qp_token: int
    opcode: Opcode


class WorkRequest:
    """A send or receive descriptor; ``sges`` are buffer views."""

    __slots__ = ("wr_id", "sges", "immediate", "next")

    def __init__(self, wr_id=0, sges=(), immediate=0, next=None):
        self.wr_id = wr_id
        self.sges = list(sges)
        self.immediate = immediate
        self.next = next

    @property
    def byte_len(self):
        return sum(len(s) for s in self.sges)

    def __iter__(self):
        wr = self
        while wr is not None:
            yield wr
            wr = wr.next

    def __repr__(self):
        return f"WorkRequest(id={self.wr_id}, sges={[len(s) for s in self.sges]}, imm={self.immediate:#x})"


def chain(wrs):
    """Link ``wrs`` into a list and return its head (None if empty)."""
    wrs = list(wrs)
    for a, b in zip(wrs, wrs[1:]):
        a.next = b
    if wrs:
        wrs[-1].next = None
        return wrs[0]
    return None


class CompletionQueue:
    """Completion ring shared by many QPs; poll never blocks."""

    def __init__(self):
        self._q = deque()

    def push(self, wc, qp=None):
        self._q.append((wc, qp))

    def poll(self, max_entries: int) -> list:
        out = []
        pop = self._q.popleft
        try:
            for _ in range(max_entries):
                wc, qp = pop()
                if qp is not None:
                    qp.sq_used -= 1
                out.append(wc)
        except IndexError:
            pass
        return out

    def __len__(self):
        return len(self._q)


class SharedReceiveQueue:
    def __init__(self, depth: int = DEFAULT_SRQ_DEPTH):
        if depth < 1:
            raise ValueError("srq depth must be positive")
        self.depth = depth
        self._wrs = deque()
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._stalled = deque()
        self._closed = False

    @property
    def pending(self) -> int:
        return len(self._wrs)

    def post_recv_chain(self, head: WorkRequest) -> int:
        with self._cond:
            posted = 0
            for wr in head:
                if len(self._wrs) >= self.depth:
                    break
                self._wrs.append(wr)
                posted += 1
            if posted == 0 and head is not None:
                raise SrqFull(self.depth)
            self._cond.notify_all()
            stalled = self._stalled
            while stalled and self._wrs:
                qp = stalled.popleft()
                qp._pump_locked()
        return posted

    def _take_blocking(self, alive):
        with self._cond:
            while not self._wrs:
                if self._closed or not alive():
                    return None
                self._cond.wait(0.05)
            return self._wrs.popleft()

    def drain(self) -> list:
        """Remove and return every posted receive WR."""
        with self._lock:
            wrs = list(self._wrs)
            self._wrs.clear()
            return wrs

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()


def _scatter(sges, payload):
    pos = 0
    n = len(payload)
    for sge in sges:
        if pos >= n:
            break
        k = min(len(sge), n - pos)
        sge[:k] = payload[pos:pos + k]
        pos += k
    if pos < n:
        raise ValueError(f"{n} byte message exceeds receive WR capacity")


_tokens = itertools.count(1)


class QueuePair:
    """Common verbs surface; ``post_send_chain`` has a single posting thread."""

    def __init__(self, device, send_cq, recv_cq, srq, sq_depth=DEFAULT_SQ_DEPTH):
        self.device = device
        self.token = (device.token_prefix << 40) | next(_tokens)
        self.send_cq = send_cq
        self.recv_cq = recv_cq
        self.srq = srq
        self.sq_depth = sq_depth
        self.sq_used = 0
        self.remote_token = None
        self.closed = False

    @property
    def connected(self):
        return self.remote_token is not None and not self.closed

    def sq_free(self) -> int:
        return self.sq_depth - self.sq_used

    def post_send_chain(self, head: WorkRequest) -> int:
        if not self.connected:
            raise QpNotConnected(self.token)
        accepted = []
        for wr in head:
            if self.sq_used >= self.sq_depth:
                break
            self.sq_used += 1
            sges = wr.sges
            if not sges:
                payload = b""
            elif len(sges) == 1:
                payload = bytes(sges[0])
            else:
                payload = b"".join(sges)
            accepted.append((wr.wr_id, wr.immediate, payload))
        if accepted:
            self._transmit(accepted)
        return len(accepted)

    def _flush_completions(self, items):
        for wr_id, imm, payload in items:
            self.send_cq.push(WorkCompletion(wr_id, WCStatus.FLUSH_ERR, len(payload), imm,
                                             self.token, Opcode.SEND), self)


# --------------------------------------------------------------------------
# loopback backend


class LoopbackFabric:
    """In-process switch: every device on one fabric can reach the others."""

    def __init__(self):
        self._qps = {}
        self._lock = threading.Lock()
        self._prefix = itertools.count(1)

    def create_device(self):
        return LoopbackDevice(self, next(self._prefix))

    def _register(self, qp):
        with self._lock:
            self._qps[qp.token] = qp

    def _unregister(self, qp):
        with self._lock:
            self._qps.pop(qp.token, None)

    def lookup(self, token):
        with self._lock:
            return self._qps.get(token)


class LoopbackDevice:
    kind = "loopback"

    def __init__(self, fabric, prefix):
        self.fabric = fabric
        self.token_prefix = prefix
        self.endpoint = None
        self.on_disconnect = None

    def create_qp(self, send_cq, recv_cq, srq, sq_depth=DEFAULT_SQ_DEPTH):
        qp = LoopbackQP(self, send_cq, recv_cq, srq, sq_depth)
        self.fabric._register(qp)
        return qp

    def close(self):
        pass


class LoopbackQP(QueuePair):
    def __init__(self, *args):
        super().__init__(*args)
        self.remote = None
        self._outbox = deque()
        self._stalled = False

    def connect(self, remote_token, endpoint=None):
        if self.remote_token is not None:
            raise ConnectFailed(f"qp {self.token:#x} already connected")
        peer = self.device.fabric.lookup(remote_token)
        if peer is None:
            raise ConnectFailed(f"no queue pair with token {remote_token:#x}")
        self.remote = peer
        self.remote_token = remote_token

    def _transmit(self, items):
        if self.remote.closed:
            self._flush_completions(items)
            return
        srq = self.remote.srq
        with srq._lock:
            self._outbox.extend(items)
            self._pump_locked()

    def _pump_locked(self):
        # caller holds the remote SRQ lock
        peer = self.remote
        srq = peer.srq
        outbox = self._outbox
        wrs = srq._wrs
        while outbox and wrs:
            wr_id, imm, payload = outbox.popleft()
            rwr = wrs.popleft()
            _scatter(rwr.sges, payload)
            peer.recv_cq.push(WorkCompletion(rwr.wr_id, WCStatus.OK, len(payload), imm,
                                             peer.token, Opcode.RECV))
            self.send_cq.push(WorkCompletion(wr_id, WCStatus.OK, len(payload), imm,
                                             self.token, Opcode.SEND), self)
        if outbox:
            if not self._stalled:
                self._stalled = True
                srq._stalled.append(self)
        else:
            self._stalled = False

    def close(self):
        if self.closed:
            return
        self.closed = True
        self.device.fabric._unregister(self)
        peer = self.remote
        if peer is not None:
            with peer.srq._lock:
                items = list(self._outbox)
                self._outbox.clear()
                if self._stalled:
                    try:
                        peer.srq._stalled.remove(self)
                    except ValueError:
                        pass
                    self._stalled = False
            self._flush_completions(items)
            if not peer.closed and peer.device.on_disconnect is not None:
                peer.device.on_disconnect(peer)


# --------------------------------------------------------------------------
# TCP backend


def _recv_exact_into(sock, view):
    while len(view):
        n = sock.recv_into(view)
        if n == 0:
            raise ConnectionError("peer closed")
        view = view[n:]


class TcpDevice:
    """Listens on a data port; one TCP stream per connected QP."""

    kind = "tcp"

    def __init__(self, host="127.0.0.1", port=0):
        self.token_prefix = random.SystemRandom().getrandbits(22) | 1 << 22
        self._listener = socket.create_server((host, port))
        self.endpoint = self._listener.getsockname()[:2]
        self._qps = {}
        self._unclaimed = {}
        self._lock = threading.Lock()
        self.on_disconnect = None
        self._closed = False
        self._acceptor = threading.Thread(target=self._accept_loop, name="verbs-accept", daemon=True)
        self._acceptor.start()

    def create_qp(self, send_cq, recv_cq, srq, sq_depth=DEFAULT_SQ_DEPTH):
        qp = TcpQP(self, send_cq, recv_cq, srq, sq_depth)
        with self._lock:
            self._qps[qp.token] = qp
        return qp

    def _accept_loop(self):
        while not self._closed:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            try:
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                buf = bytearray(HANDSHAKE.size)
                _recv_exact_into(sock, memoryview(buf))
            except OSError:
                sock.close()
                continue
            src, dst = HANDSHAKE.unpack(buf)
            with self._lock:
                qp = self._qps.get(dst)
                if qp is None or qp.remote_token != src:
                    # passive side has not called connect yet
                    self._unclaimed[dst] = (src, sock)
                    continue
            qp._attach(sock)

    def _claim(self, qp):
        with self._lock:
            entry = self._unclaimed.get(qp.token)
            if entry is not None and entry[0] == qp.remote_token:
                del self._unclaimed[qp.token]
                return entry[1]
        return None

    def _forget(self, qp):
        with self._lock:
            self._qps.pop(qp.token, None)

    def close(self):
        self._closed = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            qps = list(self._qps.values())
            unclaimed = list(self._unclaimed.values())
            self._unclaimed.clear()
        for _, sock in unclaimed:
            sock.close()
        for qp in qps:
            qp.close()


class TcpQP(QueuePair):
    def __init__(self, *args):
        super().__init__(*args)
        self._sock = None
        self._outbox = deque()
        self._cond = threading.Condition()
        self._threads = []

    def connect(self, remote_token, endpoint=None):
        """Dial ``endpoint`` actively, or wait passively when it is None."""
        if self.remote_token is not None:
            raise ConnectFailed(f"qp {self.token:#x} already connected")
        self.remote_token = remote_token
        if endpoint is None:
            sock = self.device._claim(self)
            if sock is not None:
                self._attach(sock)
            return
        try:
            sock = socket.create_connection(tuple(endpoint), timeout=5.0)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.sendall(HANDSHAKE.pack(self.token, remote_token))
        except OSError as exc:
            self.remote_token = None
            raise ConnectFailed(str(exc)) from exc
        self._attach(sock)

    def _attach(self, sock):
        with self._cond:
            if self._sock is not None or self.closed:
                sock.close()
                return
            self._sock = sock
            self._cond.notify_all()
        for target, name in ((self._write_loop, "w"), (self._read_loop, "r")):
            t = threading.Thread(target=target, name=f"verbs-{name}-{self.token:x}", daemon=True)
            t.start()
            self._threads.append(t)

    def _transmit(self, items):
        with self._cond:
            self._outbox.extend(items)
            self._cond.notify()

    def _write_loop(self):
        sock = self._sock
        pack = FRAME.pack
        while True:
            with self._cond:
                while not self._outbox and not self.closed:
                    self._cond.wait()
                if self.closed:
                    return
                batch = list(self._outbox)
                self._outbox.clear()
            parts = []
            for _wr_id, imm, payload in batch:
                parts.append(pack(FRAME.size + len(payload), imm))
                parts.append(payload)
            try:
                sock.sendall(b"".join(parts))
            except OSError:
                self._flush_completions(batch)
                self._lost()
                return
            push = self.send_cq.push
            for wr_id, imm, payload in batch:
                push(WorkCompletion(wr_id, WCStatus.OK, len(payload), imm, self.token, Opcode.SEND), self)

    def _read_loop(self):
        sock = self._sock
        hdr = bytearray(FRAME.size)
        hview = memoryview(hdr)
        srq = self.srq
        alive = lambda: not self.closed  # noqa: E731
        try:
            while True:
                _recv_exact_into(sock, hview)
                total, imm = FRAME.unpack(hdr)
                remaining = total - FRAME.size
                rwr = srq._take_blocking(alive)
                if rwr is None:
                    return
                for sge in rwr.sges:
                    if not remaining:
                        break
                    k = min(len(sge), remaining)
                    _recv_exact_into(sock, sge[:k])
                    remaining -= k
                if remaining:
                    raise ConnectionError("frame exceeds receive WR capacity")
                self.recv_cq.push(WorkCompletion(rwr.wr_id, WCStatus.OK, total - FRAME.size, imm,
                                                 self.token, Opcode.RECV))
        except (OSError, ValueError):
            self._lost()

    def _lost(self):
        if self.closed:
            return
        self.close()
        cb = self.device.on_disconnect
        if cb is not None:
            cb(self)

    def close(self):
        with self._cond:
            if self.closed:
                return
            self.closed = True
            items = list(self._outbox)
            self._outbox.clear()
            sock = self._sock
            self._cond.notify_all()
        self._flush_completions(items)
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self.device._forget(self)
