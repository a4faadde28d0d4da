"""Application layer: send API, incoming buffer queue, dispatch threads, requests.

A :class:`Node` owns one engine, one connection manager and the threads that
turn received buffers back into messages::

    recv thread --(IRB callback)--> IBQ --> coordinator --> handler threads
                                                       \\--> request map

The coordinator is the only thread touching a connection's byte stream, so
buffers that end mid-message are stitched together in arrival order.  Whole
messages are handed to handler thread ``source % N``, which keeps every
sender's messages in order.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from collections import deque
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import replace

from .config import Config
from .conn_manager import ConnectionManager
from .counters import Counters
from .engine import Engine, NextWorkPackage
from .errors import (DXNetError, InvalidSize, MalformedHeader, PeerUnreachable, RequestTimeout,
                     UnknownNode)
from .model import (DEFAULT_REGISTRY, INVALID_NID, Message, MessageHeader, MessageType,
                    StreamDecoder, serialize_message, size_of)
from .verbs import LoopbackFabric, TcpDevice
from .wim import WriteInterestManager

log = logging.getLogger(__name__)


class IncomingBufferQueue:
    """Bounded FIFO of received buffers shared by all connections.

    Single producer (the engine's receive callback), single consumer (the
    coordinator).  ``push`` returns False instead of blocking when either
    the buffer count or the byte bound would be exceeded.
    """

    def __init__(self, max_buffers: int = 8192, max_bytes: int = 128 * 1024 * 1024):
        self.max_buffers = max_buffers
        self.max_bytes = max_bytes
        self._items = deque()
        self.nbytes = 0
        self._cond = threading.Condition()

    def __len__(self):
        return len(self._items)

    def push(self, nid: int, buffer, length: int) -> bool:
        with self._cond:
            if len(self._items) >= self.max_buffers or self.nbytes + length > self.max_bytes:
                return False
            self._items.append((nid, buffer, length))
            self.nbytes += length
            if len(self._items) == 1:
                self._cond.notify()
            return True

    def pop_all(self, timeout: float | None = None) -> list:
        with self._cond:
            if not self._items:
                self._cond.wait(timeout)
            items = list(self._items)
            self._items.clear()
            self.nbytes = 0
            return items

    def wake(self):
        with self._cond:
            self._cond.notify_all()


class RequestMap:
    """Outstanding requests keyed by (destination, message id)."""

    def __init__(self):
        self._waiters = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._waiters)

    def add(self, nid: int, message_id: int) -> Future:
        fut = Future()
        with self._lock:
            key = (nid, message_id)
            if key in self._waiters:
                raise DXNetError(f"request {key} already outstanding")
            self._waiters[key] = fut
        return fut

    def fulfil(self, msg: Message) -> bool:
        with self._lock:
            fut = self._waiters.pop((msg.source, msg.message_id), None)
        if fut is None:
            return False
        fut.set_result(msg)
        return True

    def discard(self, nid: int, message_id: int) -> None:
        with self._lock:
            self._waiters.pop((nid, message_id), None)

    def fail_node(self, nid: int, exc: Exception) -> None:
        with self._lock:
            keys = [k for k in self._waiters if k[0] == nid]
            futs = [self._waiters.pop(k) for k in keys]
        for fut in futs:
            fut.set_exception(exc)


class MessageHandlerGroup:
    """N threads running registered callbacks; a sender always maps to the same thread."""

    def __init__(self, count: int = 1, name: str = "handler"):
        self.handlers = {}
        self._queues = [queue.SimpleQueue() for _ in range(count)]
        self._threads = [threading.Thread(target=self._run, args=(q,), name=f"{name}-{i}",
                                          daemon=True)
                         for i, q in enumerate(self._queues)]
        self._busy = 0
        self._idle = threading.Condition()

    def __len__(self):
        return len(self._queues)

    def register(self, handler_id: int, callback) -> None:
        self.handlers[handler_id] = callback

    def start(self):
        for t in self._threads:
            t.start()

    def dispatch(self, source: int, messages: list) -> None:
        with self._idle:
            self._busy += 1
        self._queues[source % len(self._queues)].put(messages)

    def _run(self, q):
        handlers = self.handlers
        while True:
            batch = q.get()
            if batch is None:
                return
            for msg in batch:
                cb = handlers.get(msg.handler_id)
                if cb is None:
                    log.warning("no handler for id %d, dropping message from %d",
                                msg.handler_id, msg.source)
                    continue
                try:
                    cb(msg)
                except Exception:
                    log.exception("handler %d failed", msg.handler_id)
            with self._idle:
                self._busy -= 1
                if not self._busy:
                    self._idle.notify_all()

    def wait_idle(self, timeout=None) -> bool:
        with self._idle:
            return self._idle.wait_for(lambda: self._busy == 0, timeout)

    def stop(self):
        for q in self._queues:
            q.put(None)
        for t in self._threads:
            if t.is_alive():
                t.join(timeout=5)


class Node:
    def __init__(self, nid: int, config: Config | None = None, device=None, hosts=None, *,
                 registry=DEFAULT_REGISTRY, bind=None):
        self.nid = nid
        self.config = config = config or Config()
        config.validate()
        self.registry = registry
        self.counters = Counters()
        self.device = device if device is not None else LoopbackFabric().create_device()
        self.wim = WriteInterestManager(config.connection.max_connections)
        self.ibq = IncomingBufferQueue(config.core.ibq_max_buffers, config.core.ibq_max_bytes)
        self.requests = RequestMap()
        self.handlers = MessageHandlerGroup(config.core.message_handlers, f"handler-{nid}")
        self.engine = Engine(config.engine, nid, self.device,
                             get_connection=self._lookup,
                             get_next_data_to_send=self.get_next_data_to_send,
                             received=self.on_received,
                             on_connection_error=self._connection_error,
                             counters=self.counters)
        self.cm = ConnectionManager(nid, hosts or {}, self.device, self.engine.create_qp,
                                    config=config.connection, fc_config=config.fc,
                                    orb_capacity=config.core.orb_capacity,
                                    counters=self.counters, on_ready=self._connection_ready,
                                    on_closed=self._connection_closed, bind=bind)
        self._decoders = {}
        self._coordinator = threading.Thread(target=self._coordinate, name=f"coordinator-{nid}",
                                             daemon=True)
        self._running = False
        self._in_flight = 0

    @property
    def address(self):
        return self.cm.address

    def start(self) -> "Node":
        self._running = True
        self.handlers.start()
        self._coordinator.start()
        self.engine.start()
        self.cm.start()
        return self

    def register_handler(self, handler_id: int, callback) -> None:
        self.handlers.register(handler_id, callback)

    # -- sending -------------------------------------------------------------

    def _timeout(self, timeout):
        return self.config.core.send_timeout_ms / 1e3 if timeout is None else timeout

    def send_message(self, msg: Message, timeout: float | None = None) -> Message:
        """Serialize ``msg`` into the destination's ring and return without waiting.

        Returns the message as sent, carrying its assigned message id.
        """
        timeout = self._timeout(timeout)
        deadline = time.monotonic() + timeout
        conn = self.cm.get_connection(msg.destination, timeout)
        if msg.msg_type is not MessageType.RESPONSE:
            msg = replace(msg, header=replace(msg.header, message_id=conn.next_message_id()))
        self._write(conn, msg, deadline)
        return msg

    def _write(self, conn, msg, deadline):
        size = size_of(msg, self.registry)
        if size > conn.orb.capacity:
            raise InvalidSize(f"{size} byte message exceeds the {conn.orb.capacity} byte ring")
        conn.fc.acquire(size, max(0.0, deadline - time.monotonic()))
        res = conn.orb.reserve_blocking(size, max(0.0, deadline - time.monotonic()))
        serialize_message(msg, res.segments, self.registry)
        conn.orb.commit(res)
        try:
            self.wim.signal_data(conn.remote)
        except UnknownNode:
            raise PeerUnreachable(conn.remote) from None
        c = self.counters
        c.add("bytes_sent", size)
        c.add("messages_sent")

    def send(self, destination: int, handler_id: int, payload=b"", timeout=None) -> Message:
        return self.send_message(Message.create(destination, handler_id, payload), timeout)

    def send_request_async(self, msg: Message, timeout: float | None = None) -> Future:
        """Send a request; the returned future resolves to the response message."""
        timeout = self._timeout(timeout)
        deadline = time.monotonic() + timeout
        conn = self.cm.get_connection(msg.destination, timeout)
        mid = conn.next_message_id()
        msg = replace(msg, header=MessageHeader(MessageType.REQUEST, msg.handler_id, mid))
        fut = self.requests.add(msg.destination, mid)
        fut.request = msg
        try:
            self._write(conn, msg, deadline)
        except BaseException:
            self.requests.discard(msg.destination, mid)
            raise
        return fut

    def send_request(self, msg: Message, timeout: float | None = None) -> Message:
        if timeout is None:
            timeout = self.config.core.request_timeout_ms / 1e3
        fut = self.send_request_async(msg, timeout)
        return self.collect_response(fut, timeout)

    def collect_response(self, fut: Future, timeout: float | None = None) -> Message:
        try:
            return fut.result(timeout)
        except FutureTimeout:
            req = fut.request
            self.requests.discard(req.destination, req.message_id)
            raise RequestTimeout(f"no response from {req.destination} for request "
                                 f"{req.message_id}") from None

    def send_response(self, request: Message, payload=b"", timeout=None) -> None:
        header = MessageHeader(MessageType.RESPONSE, request.handler_id, request.message_id)
        self.send_message(Message(request.source, header, payload), timeout)

    # -- engine callbacks (send thread) ------------------------------------------

    def _lookup(self, nid):
        return self.cm.lookup(nid)

    def get_next_data_to_send(self, prev, completed):
        lookup = self.cm.lookup
        nid = prev.node_id
        if nid != INVALID_NID:
            conn = lookup(nid)
            if conn is not None:
                conn.orb.advance_posted(prev.num_bytes_posted)
                conn.fc.confirm_fc_posted(prev.fc_data_posted)
                if prev.num_bytes_not_posted or prev.fc_data_not_posted:
                    self.wim.signal_data(nid)
        if completed.node_ids:
            confirmed = 0
            for nid in completed.node_ids:
                conn = lookup(nid)
                if conn is not None:
                    n = completed.bytes_written[nid]
                    conn.orb.advance_confirmed(n)
                    confirmed += n
            self.counters.add("bytes_confirmed", confirmed)
        while True:
            interest = self.wim.next_interest()
            if interest is None:
                return None
            nid = interest[0]
            conn = lookup(nid)
            if conn is None:
                continue
            front, back, length = conn.orb.ready()
            fc = conn.fc.take_pending_fc()
            if length or fc:
                return NextWorkPackage(back, front, fc, nid, length)

    def _connection_error(self, nid):
        self.cm.report_error(nid)

    # -- engine callback (receive thread) ------------------------------------------

    def on_received(self, irb) -> int:
        lookup = self.cm.lookup
        consumed = 0
        for entry in irb:
            nid = entry.source_node_id
            conn = lookup(nid)
            if conn is None:
                if self.cm.creating(nid):
                    # the handshake reply is still being processed
                    break
                if entry.buffer is not None:
                    self.engine.return_buffer(entry.buffer)
                self.counters.add("entries_dropped")
                consumed += 1
                continue
            if entry.buffer is not None and not self.ibq.push(nid, entry.buffer, entry.data_length):
                self.counters.add("ibq_backpressure_events")
                break
            if entry.fc_data:
                conn.fc.on_fc_confirmed(entry.fc_data)
                self.counters.add("fc_windows_received", entry.fc_data)
            consumed += 1
        return consumed

    # -- coordinator ---------------------------------------------------------------

    def _coordinate(self):
        while self._running:
            items = self.ibq.pop_all(0.05)
            if items:
                self.coordinator_step(items)

    def coordinator_step(self, items) -> int:
        """Reassemble and route the given IBQ entries; returns messages produced."""
        produced = 0
        return_buffer = self.engine.return_buffer
        for nid, buf, length in items:
            dec = self._decoders.get(nid)
            if dec is None:
                dec = self._decoders[nid] = StreamDecoder(self.nid, nid, self.registry)
            try:
                msgs = dec.feed(buf.view[:length])
            except MalformedHeader as exc:
                log.error("malformed stream from %d, closing: %s", nid, exc)
                self._decoders.pop(nid, None)
                self.cm.report_error(nid)
                msgs = []
            finally:
                return_buffer(buf)
            conn = self.cm.lookup(nid)
            if conn is not None:
                if conn.fc.on_data_received(length):
                    try:
                        self.wim.signal_fc(nid)
                    except UnknownNode:
                        pass
            if not msgs:
                continue
            produced += len(msgs)
            self.counters.add("messages_received", len(msgs))
            plain = []
            for m in msgs:
                if m.msg_type is MessageType.RESPONSE:
                    if not self.requests.fulfil(m):
                        self.counters.add("late_responses")
                else:
                    plain.append(m)
            if plain:
                self.handlers.dispatch(nid, plain)
        return produced

    # -- connection lifecycle (manager thread) -----------------------------------------

    def _connection_ready(self, conn):
        self.wim.register(conn.remote)

    def _connection_closed(self, conn):
        self.wim.unregister(conn.remote)
        self.requests.fail_node(conn.remote, PeerUnreachable(conn.remote))

    # -- teardown ------------------------------------------------------------------------

    def flush(self, timeout: float = 10.0) -> bool:
        """Wait until every byte handed to the rings has been confirmed by its receiver."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if all(c.orb.front == c.orb.reserved for c in self.cm.connections()):
                return True
            time.sleep(0.001)
        return False

    def quiesce(self, timeout: float = 10.0) -> bool:
        """Wait until received data has been dispatched and handled."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if not len(self.engine.irb) and not len(self.ibq):
                if self.handlers.wait_idle(max(0.0, deadline - time.monotonic())):
                    if not len(self.engine.irb) and not len(self.ibq):
                        return True
            time.sleep(0.001)
        return False

    def shutdown(self, flush: bool = True, timeout: float = 10.0) -> None:
        if not self._running:
            return
        if flush:
            self.flush(timeout)
        self.engine.stop()
        self.cm.shutdown()
        self.engine.release_receive_queue()
        self._running = False
        self.ibq.wake()
        self._coordinator.join(timeout=5)
        for _, buf, _ in self.ibq.pop_all(0):
            self.engine.return_buffer(buf)
        self.handlers.stop()
        self.device.close()

    def buffer_counts(self) -> dict:
        return self.engine.buffer_counts()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown(flush=False)


def init(nid: int, config: Config | None = None, device=None, hosts=None, **kw) -> Node:
    """Create and start a node."""
    return Node(nid, config, device, hosts, **kw).start()


def local_cluster(count: int, config: Config | None = None, transport: str = "loopback",
                  registry=DEFAULT_REGISTRY) -> list:
    """Start ``count`` nodes in this process that know each other's addresses."""
    fabric = LoopbackFabric() if transport == "loopback" else None
    nodes = []
    for nid in range(count):
        device = fabric.create_device() if fabric else TcpDevice("127.0.0.1")
        nodes.append(Node(nid, config, device, registry=registry, bind=("127.0.0.1", 0)))
    for node in nodes:
        for other in nodes:
            if other is not node:
                node.cm.add_host(other.nid, *other.address)
    for node in nodes:
        node.start()
    return nodes
