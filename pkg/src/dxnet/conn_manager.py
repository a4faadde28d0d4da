"""Job-queue driven connection manager.

One dedicated thread owns the connection table.  Other threads only read
the table; a missing connection is requested by queueing a CREATE job and
waiting on its future.  Discovery and QP data exchange use UDP packets
(little endian, ``magic`` = 0x49424458)::

    DISCOVER_REQ     [magic:4]["D"][srcNid:2][listenPort:2]
    DISCOVER_ACK     [magic:4]["d"][srcNid:2]
    QP_EXCHANGE_REQ  [magic:4]["Q"][srcNid:2][qpToken:8][dataPort:2]
    QP_EXCHANGE_ACK  [magic:4]["q"][srcNid:2][qpToken:8][dataPort:2]

If both sides create the same connection at once, the exchange started by
the lower node id wins: the lower node ignores the competing request and
the higher node answers it instead of its own.
"""

from __future__ import annotations

import enum
import itertools
import logging
import queue
import socket
import struct
import threading
import time
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field

from .config import ConnectionConfig, FlowControlConfig
from .errors import (ConnectFailed, ConnectionLimitExhausted, CreationTimeout, ExchangeTimeout,
                     NodeNotDiscovered, SelfConnection)
from .flow_control import FlowControl
from .model import INVALID_NID, check_nid
from .orb import DEFAULT_CAPACITY, OutgoingRingBuffer

log = logging.getLogger(__name__)

MAGIC = 0x49424458
_DISC_REQ = struct.Struct("<IcHH")
_DISC_ACK = struct.Struct("<IcH")
_QP_PKT = struct.Struct("<IcHQH")


def encode_discover_req(src_nid, listen_port):
    return _DISC_REQ.pack(MAGIC, b"D", src_nid, listen_port)


def encode_discover_ack(src_nid):
    return _DISC_ACK.pack(MAGIC, b"d", src_nid)


def encode_qp_exchange(kind: bytes, src_nid, qp_token, data_port):
    return _QP_PKT.pack(MAGIC, kind, src_nid, qp_token, data_port)


def decode_packet(data: bytes):
    """Return ``(kind, fields...)`` or None for anything malformed."""
    if len(data) < 5 or struct.unpack_from("<I", data)[0] != MAGIC:
        return None
    kind = data[4:5]
    try:
        if kind == b"D" and len(data) == _DISC_REQ.size:
            return (kind,) + _DISC_REQ.unpack(data)[2:]
        if kind == b"d" and len(data) == _DISC_ACK.size:
            return (kind,) + _DISC_ACK.unpack(data)[2:]
        if kind in (b"Q", b"q") and len(data) == _QP_PKT.size:
            return (kind,) + _QP_PKT.unpack(data)[2:]
    except struct.error:
        pass
    return None


def parse_hosts(text: str) -> dict:
    """``nid hostname:port`` per line; ``#`` starts a comment."""
    hosts = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            nid_s, addr = line.split()
            host, port_s = addr.rsplit(":", 1)
            nid = check_nid(int(nid_s, 0))
            hosts[nid] = (host, int(port_s))
        except ValueError:
            raise ValueError(f"hosts line {no}: expected 'nid host:port', got {raw!r}") from None
    return hosts


def load_hosts(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_hosts(fh.read())


class ConnState(enum.Enum):
    CREATING = 0
    READY = 1
    CLOSING = 2


class JobKind(enum.Enum):
    CREATE = 0
    DISCOVER = 1
    CLOSE = 2


_ids = itertools.count()


@dataclass
class Connection:
    remote: int
    qp: object
    orb: OutgoingRingBuffer
    fc: FlowControl
    state: ConnState = ConnState.CREATING
    last_used: float = 0.0
    message_ids: object = field(default_factory=itertools.count)
    # tie-break key for equal last_used values
    serial: int = field(default_factory=lambda: next(_ids))

    def next_message_id(self) -> int:
        return next(self.message_ids) & 0xFFFFFFFF


@dataclass
class ConnectionJob:
    kind: JobKind
    target: int = INVALID_NID
    future: Future = field(default_factory=Future)


@dataclass
class _Attempt:
    nid: int
    future: Future
    deadline: float
    phase: str = "discover"
    qp: object = None
    tries: int = 0
    retry_at: float = 0.0


class ConnectionManager:
    def __init__(self, own_nid: int, hosts: dict, device, create_qp, *,
                 config: ConnectionConfig | None = None, fc_config: FlowControlConfig | None = None,
                 orb_capacity: int = DEFAULT_CAPACITY, counters=None,
                 on_ready=None, on_closed=None, bind=None):
        self.own_nid = check_nid(own_nid)
        self.config = config or ConnectionConfig()
        self.fc_config = fc_config or FlowControlConfig()
        self.orb_capacity = orb_capacity
        self.device = device
        self._create_qp = create_qp
        self.counters = counters
        self.on_ready = on_ready
        self.on_closed = on_closed

        self._hosts_lock = threading.Lock()
        self._hosts = dict(hosts)
        self.discovered = set()
        self._newly = []
        self._table = {}
        self._by_token = {}
        self._creating = {}
        self._lock = threading.Lock()
        self._attempts = {}
        self._inbox = queue.Queue()
        self.handshakes = {}

        if bind is None:
            bind = self._hosts.get(own_nid, ("127.0.0.1", 0))
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind(tuple(bind))
        self.address = self._sock.getsockname()[:2]
        with self._hosts_lock:
            self._hosts[own_nid] = self.address
        device.on_disconnect = self._qp_lost
        self._running = False
        self._threads = []

    # -- hostname list -------------------------------------------------------

    def add_host(self, nid: int, host: str, port: int) -> None:
        with self._hosts_lock:
            self._hosts[check_nid(nid)] = (host, port)

    def remove_host(self, nid: int) -> None:
        with self._hosts_lock:
            self._hosts.pop(nid, None)
        self.discovered.discard(nid)

    def hosts(self) -> dict:
        with self._hosts_lock:
            return dict(self._hosts)

    def _addr(self, nid):
        with self._hosts_lock:
            return self._hosts.get(nid)

    # -- public, any thread ----------------------------------------------------

    def start(self) -> None:
        self._running = True
        for target, name in ((self._udp_loop, "udp"), (self._manager_loop, "mgr")):
            t = threading.Thread(target=target, name=f"conman-{name}-{self.own_nid}", daemon=True)
            t.start()
            self._threads.append(t)

    def lookup(self, nid: int):
        """READY connection or None, never blocks."""
        return self._table.get(nid)

    def creating(self, nid: int) -> bool:
        return nid in self._attempts

    def connections(self) -> list:
        return list(self._table.values())

    def get_connection(self, nid: int, timeout: float | None = None) -> Connection:
        conn = self._table.get(nid)
        if conn is not None:
            conn.last_used = time.monotonic()
            return conn
        if nid == self.own_nid:
            raise SelfConnection(nid)
        check_nid(nid)
        if self._addr(nid) is None and nid not in self.discovered:
            raise NodeNotDiscovered(nid)
        fut = self.submit_create(nid)
        if timeout is None:
            timeout = self.config.creation_timeout_ms / 1e3
        try:
            conn = fut.result(timeout)
        except FutureTimeout:
            raise CreationTimeout(nid) from None
        conn.last_used = time.monotonic()
        return conn

    def submit_create(self, nid: int) -> Future:
        """Queue a CREATE without waiting; concurrent callers share the future."""
        with self._lock:
            fut = self._creating.get(nid)
            if fut is None:
                fut = self._creating[nid] = Future()
                self._inbox.put(ConnectionJob(JobKind.CREATE, nid, fut))
        return fut

    def submit(self, job: ConnectionJob) -> Future:
        self._inbox.put(job)
        return job.future

    def run_discovery(self, timeout: float = 5.0) -> list:
        return self.submit(ConnectionJob(JobKind.DISCOVER)).result(timeout)

    def close_connection(self, nid: int, timeout: float = 5.0) -> None:
        self.submit(ConnectionJob(JobKind.CLOSE, nid)).result(timeout)

    def report_error(self, nid: int) -> None:
        """Called by the engine when a connection fails; closes it on the manager thread."""
        self._inbox.put(("lost-nid", nid))

    def shutdown(self) -> None:
        if not self._running:
            self._sock.close()
            return
        self._running = False
        self._inbox.put(None)
        try:
            self._sock.sendto(b"", self.address)
        except OSError:
            pass
        for t in self._threads:
            t.join(timeout=5)
        self._sock.close()
        for conn in list(self._table.values()):
            conn.qp.close()
        self._table.clear()

    # -- manager thread ----------------------------------------------------------

    def _udp_loop(self):
        while self._running:
            try:
                data, addr = self._sock.recvfrom(64)
            except OSError:
                return
            if data:
                self._inbox.put(("pkt", data, addr))

    def _qp_lost(self, qp):
        self._inbox.put(("lost", qp.token))

    def _manager_loop(self):
        interval = self.config.discovery_interval_ms / 1e3
        next_discovery = time.monotonic()
        while self._running:
            now = time.monotonic()
            if now >= next_discovery:
                self.discovery_tick()
                next_discovery = now + interval
            wake = next_discovery
            for a in self._attempts.values():
                wake = min(wake, a.retry_at, a.deadline)
            try:
                item = self._inbox.get(timeout=max(0.0, wake - time.monotonic()))
            except queue.Empty:
                item = False
            if item is None:
                break
            try:
                if isinstance(item, ConnectionJob):
                    self.process_job(item)
                elif item:
                    self._handle_event(item)
                self._check_attempts()
            except Exception:
                log.exception("connection manager failed on %r", item)

    def _handle_event(self, item):
        kind = item[0]
        if kind == "pkt":
            self._handle_packet(item[1], item[2])
        elif kind == "lost":
            conn = self._by_token.get(item[1])
            if conn is not None:
                self._close(conn.remote, lost=True)
        elif kind == "lost-nid":
            if item[1] in self._table:
                self._close(item[1], lost=True)

    def process_job(self, job: ConnectionJob) -> None:
        try:
            if job.kind is JobKind.DISCOVER:
                job.future.set_result(self.discovery_tick())
            elif job.kind is JobKind.CLOSE:
                self._close(job.target)
                job.future.set_result(None)
            else:
                self._start_create(job)
        except Exception as exc:
            if not job.future.done():
                job.future.set_exception(exc)

    def discovery_tick(self) -> list:
        """Probe every undiscovered host; returns nodes discovered since the last tick."""
        with self._hosts_lock:
            targets = [(n, a) for n, a in self._hosts.items()
                       if n != self.own_nid and n not in self.discovered]
        pkt = encode_discover_req(self.own_nid, self.address[1])
        for _, addr in targets:
            self._send(pkt, addr)
        newly, self._newly = self._newly, []
        return newly

    def _send(self, pkt, addr):
        try:
            self._sock.sendto(pkt, tuple(addr))
        except OSError as exc:
            log.debug("udp send to %s failed: %s", addr, exc)

    def _mark_discovered(self, nid, addr=None):
        if nid == self.own_nid:
            return
        if addr is not None:
            with self._hosts_lock:
                self._hosts.setdefault(nid, addr)
        if nid not in self.discovered:
            self.discovered.add(nid)
            self._newly.append(nid)
        a = self._attempts.get(nid)
        if a is not None and a.phase == "discover":
            self._begin_exchange(a)

    def _handle_packet(self, data, addr):
        pkt = decode_packet(data)
        if pkt is None:
            return
        kind = pkt[0]
        if kind == b"D":
            src, port = pkt[1], pkt[2]
            self._send(encode_discover_ack(self.own_nid), (addr[0], port))
            self._mark_discovered(src, (addr[0], port))
        elif kind == b"d":
            self._mark_discovered(pkt[1])
        elif kind == b"Q":
            self._on_exchange_request(pkt[1], pkt[2], pkt[3], addr)
        elif kind == b"q":
            self._on_exchange_ack(pkt[1], pkt[2], pkt[3], addr)

    # -- creation state machine ------------------------------------------------

    def _start_create(self, job):
        nid = job.target
        if nid in self._table:
            self._resolve(nid, self._table[nid])
            return
        if nid in self._attempts:
            return
        now = time.monotonic()
        a = _Attempt(nid, job.future, now + self.config.creation_timeout_ms / 1e3)
        self._attempts[nid] = a
        if nid in self.discovered:
            self._begin_exchange(a)
        else:
            addr = self._addr(nid)
            if addr is None:
                self._fail(a, NodeNotDiscovered(nid))
                return
            self._send(encode_discover_req(self.own_nid, self.address[1]), addr)
            a.retry_at = now + self.config.discovery_interval_ms / 1e3

    def _data_port(self):
        ep = self.device.endpoint
        return ep[1] if ep else 0

    def _begin_exchange(self, a):
        a.phase = "exchange"
        if a.qp is None:
            a.qp = self._create_qp()
        self._send_exchange(a)

    def _send_exchange(self, a):
        a.tries += 1
        a.retry_at = time.monotonic() + self.config.exchange_timeout_ms / 1e3
        self._send(encode_qp_exchange(b"Q", self.own_nid, a.qp.token, self._data_port()),
                   self._addr(a.nid))
        if self.counters is not None:
            self.counters.add("exchange_requests_sent")

    def _check_attempts(self):
        now = time.monotonic()
        for a in list(self._attempts.values()):
            if a.phase == "discover":
                if now >= a.deadline:
                    self._fail(a, NodeNotDiscovered(a.nid))
                elif now >= a.retry_at:
                    self._send(encode_discover_req(self.own_nid, self.address[1]), self._addr(a.nid))
                    a.retry_at = now + self.config.discovery_interval_ms / 1e3
            elif now >= a.retry_at:
                if a.tries < self.config.exchange_retries:
                    self._send_exchange(a)
                else:
                    self._fail(a, CreationTimeout(f"{a.nid}: {ExchangeTimeout.__name__} after "
                                                  f"{a.tries} attempts"))

    def _fail(self, a, exc):
        self._attempts.pop(a.nid, None)
        if a.qp is not None:
            a.qp.close()
        with self._lock:
            self._creating.pop(a.nid, None)
        if not a.future.done():
            a.future.set_exception(exc)

    def _resolve(self, nid, conn):
        with self._lock:
            fut = self._creating.pop(nid, None)
        if fut is not None and not fut.done():
            fut.set_result(conn)

    def _on_exchange_request(self, src, token, data_port, addr):
        existing = self._table.get(src)
        if existing is not None:
            if existing.qp.remote_token == token:
                # retry of an exchange we already answered
                self._send(encode_qp_exchange(b"q", self.own_nid, existing.qp.token,
                                              self._data_port()), self._addr(src) or addr)
                return
            self._close(src)
        a = self._attempts.get(src)
        if a is not None and a.phase == "exchange" and self.own_nid < src:
            # both sides are creating; ours wins
            return
        self._mark_discovered(src, None)
        a = self._attempts.get(src)
        qp = a.qp if a is not None and a.qp is not None else self._create_qp()
        try:
            qp.connect(token, None)
        except ConnectFailed as exc:
            log.warning("accepting connection from %d failed: %s", src, exc)
            if a is None or qp is not a.qp:
                qp.close()
            return
        conn = self._install(src, qp)
        self._attempts.pop(src, None)
        self._send(encode_qp_exchange(b"q", self.own_nid, qp.token, self._data_port()),
                   self._addr(src) or addr)
        self.handshakes[src] = self.handshakes.get(src, 0) + 1
        self._resolve(src, conn)

    def _on_exchange_ack(self, src, token, data_port, addr):
        a = self._attempts.get(src)
        if a is None or a.phase != "exchange":
            return
        endpoint = None
        if self.device.endpoint is not None:
            endpoint = (self._addr(src)[0], data_port)
        try:
            a.qp.connect(token, endpoint)
        except ConnectFailed as exc:
            log.warning("connecting to %d failed: %s", src, exc)
            return
        # the peer may already be sending: stay "creating" until the table has it
        conn = self._install(src, a.qp)
        del self._attempts[src]
        self.handshakes[src] = self.handshakes.get(src, 0) + 1
        self._resolve(src, conn)

    def _install(self, nid, qp):
        if len(self._table) >= self.config.max_connections:
            if self.evict_if_needed() is None:
                qp.close()
                raise ConnectionLimitExhausted(nid)
        conn = Connection(nid, qp, OutgoingRingBuffer(self.orb_capacity),
                          FlowControl(self.fc_config.window_size, self.fc_config.threshold,
                                      self.fc_config.mode),
                          last_used=time.monotonic())
        if self.on_ready is not None:
            self.on_ready(conn)
        conn.state = ConnState.READY
        self._table[nid] = conn
        self._by_token[qp.token] = conn
        return conn

    def evict_if_needed(self):
        """Close the least recently used connection when the table is full."""
        if len(self._table) < self.config.max_connections:
            return None
        victim = min(self._table.values(), key=lambda c: (c.last_used, c.remote))
        self._close(victim.remote)
        return victim.remote

    def _close(self, nid, lost=False):
        conn = self._table.pop(nid, None)
        if conn is None:
            return
        conn.state = ConnState.CLOSING
        self._by_token.pop(conn.qp.token, None)
        conn.qp.close()
        if lost:
            self.discovered.discard(nid)
        if self.on_closed is not None:
            self.on_closed(conn)
