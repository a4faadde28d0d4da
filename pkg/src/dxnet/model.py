"""Message model, wire envelope and payload codecs.

Every message on the wire is a fixed 16 byte header followed by the
payload bytes::

    [msgType:1][flags:1][handlerId:2][messageId:4][payloadLength:4][reserved:4]

All integers are little endian; ``flags`` and ``reserved`` are written as
zero.  The handler id selects both the receive callback and the payload
codec (see :class:`CodecRegistry`).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Any, Protocol

from .errors import CapacityExceeded, MalformedHeader, Truncated

INVALID_NID = 0xFFFF
HEADER = struct.Struct("<BBHIII")
HEADER_SIZE = HEADER.size
MAX_U32 = 0xFFFFFFFF


def check_nid(nid: int) -> int:
    if not 0 <= nid < INVALID_NID:
        raise ValueError(f"invalid node id {nid!r}")
    return nid


class MessageType(enum.IntEnum):
    MESSAGE = 0
    REQUEST = 1
    RESPONSE = 2


@dataclass(frozen=True)
class MessageHeader:
    msg_type: MessageType = MessageType.MESSAGE
    handler_id: int = 0
    message_id: int = 0
    # Filled in from the encoded payload; not part of message identity.
    payload_length: int = field(default=0, compare=False)


@dataclass
class Message:
    destination: int
    header: MessageHeader
    payload: Any = b""
    source: int = field(default=INVALID_NID, compare=False)

    @classmethod
    def create(cls, destination, handler_id, payload=b"",
               msg_type=MessageType.MESSAGE, message_id=0):
        return cls(destination, MessageHeader(msg_type, handler_id, message_id), payload)

    @property
    def msg_type(self) -> MessageType:
        return self.header.msg_type

    @property
    def handler_id(self) -> int:
        return self.header.handler_id

    @property
    def message_id(self) -> int:
        return self.header.message_id


# --------------------------------------------------------------------------
# payload codecs


class PayloadCodec(Protocol):
    def size(self, payload: Any) -> int: ...

    def encode(self, payload: Any) -> bytes: ...

    def decode(self, data: memoryview) -> Any: ...


class RawCodec:
    """Payload is an opaque bytes-like object."""

    def size(self, payload):
        return len(payload)

    def encode(self, payload):
        return bytes(payload)

    def decode(self, data):
        return bytes(data)


_T_NONE, _T_TRUE, _T_FALSE, _T_INT, _T_FLOAT, _T_BYTES, _T_STR, _T_LIST, _T_TUPLE, _T_DICT = range(10)
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")
_U32 = struct.Struct("<I")
_I64_MIN, _I64_MAX = -(1 << 63), (1 << 63) - 1


class ObjectCodec:
    """Self-describing codec for nested graphs of plain Python values.

    Supported: None, bool, int (signed 64 bit), float, bytes, str, list,
    tuple and dict.  Every value is a one byte tag followed by a fixed width
    scalar or a u32 length/count prefix and its contents.
    """

    def size(self, obj):
        if obj is None or obj is True or obj is False:
            return 1
        t = type(obj)
        if t is int:
            return 9
        if t is float:
            return 9
        if t is bytes or t is bytearray:
            return 5 + len(obj)
        if t is str:
            return 5 + len(obj.encode("utf-8"))
        if t is list or t is tuple:
            return 5 + sum(self.size(x) for x in obj)
        if t is dict:
            return 5 + sum(self.size(k) + self.size(v) for k, v in obj.items())
        raise TypeError(f"unsupported payload type {t.__name__}")

    def encode(self, obj):
        out = bytearray()
        self._encode(obj, out)
        return bytes(out)

    def _encode(self, obj, out):
        if obj is None:
            out.append(_T_NONE)
        elif obj is True:
            out.append(_T_TRUE)
        elif obj is False:
            out.append(_T_FALSE)
        else:
            t = type(obj)
            if t is int:
                if not _I64_MIN <= obj <= _I64_MAX:
                    raise OverflowError("integer does not fit 64 bits")
                out.append(_T_INT)
                out += _I64.pack(obj)
            elif t is float:
                out.append(_T_FLOAT)
                out += _F64.pack(obj)
            elif t is bytes or t is bytearray:
                out.append(_T_BYTES)
                out += _U32.pack(len(obj))
                out += obj
            elif t is str:
                raw = obj.encode("utf-8")
                out.append(_T_STR)
                out += _U32.pack(len(raw))
                out += raw
            elif t is list or t is tuple:
                out.append(_T_LIST if t is list else _T_TUPLE)
                out += _U32.pack(len(obj))
                for x in obj:
                    self._encode(x, out)
            elif t is dict:
                out.append(_T_DICT)
                out += _U32.pack(len(obj))
                for k, v in obj.items():
                    self._encode(k, out)
                    self._encode(v, out)
            else:
                raise TypeError(f"unsupported payload type {t.__name__}")

    def decode(self, data):
        obj, pos = self._decode(data, 0)
        if pos != len(data):
            raise MalformedHeader(f"{len(data) - pos} trailing payload bytes")
        return obj

    def _decode(self, data, pos):
        try:
            tag = data[pos]
        except IndexError:
            raise MalformedHeader("payload ends inside a value") from None
        pos += 1
        if tag == _T_NONE:
            return None, pos
        if tag == _T_TRUE:
            return True, pos
        if tag == _T_FALSE:
            return False, pos
        if tag == _T_INT:
            return _I64.unpack_from(data, pos)[0], pos + 8
        if tag == _T_FLOAT:
            return _F64.unpack_from(data, pos)[0], pos + 8
        (n,) = _U32.unpack_from(data, pos)
        pos += 4
        if tag == _T_BYTES:
            return bytes(data[pos:pos + n]), pos + n
        if tag == _T_STR:
            return str(data[pos:pos + n], "utf-8"), pos + n
        if tag == _T_LIST or tag == _T_TUPLE:
            items = []
            for _ in range(n):
                x, pos = self._decode(data, pos)
                items.append(x)
            return (items if tag == _T_LIST else tuple(items)), pos
        if tag == _T_DICT:
            d = {}
            for _ in range(n):
                k, pos = self._decode(data, pos)
                d[k], pos = self._decode(data, pos)
            return d, pos
        raise MalformedHeader(f"unknown payload tag {tag:#x}")


class CodecRegistry:
    """Maps handler ids to payload codecs; unregistered ids carry raw bytes.

    Meant to be filled once at startup and only read afterwards.
    """

    def __init__(self, default=None):
        self._codecs = {}
        self.default = default if default is not None else RawCodec()

    def register(self, handler_id, codec):
        if handler_id in self._codecs:
            raise ValueError(f"codec for handler {handler_id} already registered")
        self._codecs[handler_id] = codec

    def get(self, handler_id):
        return self._codecs.get(handler_id, self.default)


DEFAULT_REGISTRY = CodecRegistry()


# --------------------------------------------------------------------------
# (de)serialization


def size_of(msg: Message, registry: CodecRegistry = DEFAULT_REGISTRY) -> int:
    return HEADER_SIZE + registry.get(msg.header.handler_id).size(msg.payload)


def encode_message(msg: Message, registry: CodecRegistry = DEFAULT_REGISTRY) -> bytes:
    h = msg.header
    payload = registry.get(h.handler_id).encode(msg.payload)
    return HEADER.pack(h.msg_type, 0, h.handler_id, h.message_id, len(payload), 0) + payload


def serialize_message(msg: Message, region, registry: CodecRegistry = DEFAULT_REGISTRY) -> int:
    """Write ``msg`` into ``region`` and return the number of bytes written.

    ``region`` is a writable buffer or a sequence of one or two writable
    segments (a ring buffer reservation that wraps).  Nothing is written if
    the message does not fit.
    """
    data = encode_message(msg, registry)
    if isinstance(region, (list, tuple)):
        segments = region
    else:
        segments = (memoryview(region),)
    capacity = sum(len(s) for s in segments)
    if len(data) > capacity:
        raise CapacityExceeded(f"message needs {len(data)} bytes, region holds {capacity}")
    pos = 0
    for seg in segments:
        n = min(len(seg), len(data) - pos)
        seg[:n] = data[pos:pos + n]
        pos += n
    return len(data)


def peek_length(buf, offset: int = 0) -> int:
    """Total encoded size of the message starting at ``offset``."""
    if len(buf) - offset < HEADER_SIZE:
        raise Truncated("incomplete header")
    return HEADER_SIZE + _U32.unpack_from(buf, offset + 8)[0]


def deserialize_message(buf, offset: int = 0, *, destination: int = INVALID_NID,
                        registry: CodecRegistry = DEFAULT_REGISTRY):
    """Decode one message at ``offset``; returns ``(message, bytes_consumed)``."""
    avail = len(buf) - offset
    if avail < HEADER_SIZE:
        raise Truncated(f"need {HEADER_SIZE} header bytes, have {avail}")
    mtype, _flags, hid, mid, plen, _rsv = HEADER.unpack_from(buf, offset)
    if mtype > 2:
        raise MalformedHeader(f"unknown message type {mtype:#x}")
    total = HEADER_SIZE + plen
    if avail < total:
        raise Truncated(f"need {total} bytes, have {avail}")
    start = offset + HEADER_SIZE
    payload = registry.get(hid).decode(memoryview(buf)[start:start + plen])
    header = MessageHeader(MessageType(mtype), hid, mid, plen)
    return Message(destination, header, payload), total


class StreamDecoder:
    """Reassembles messages from a byte stream delivered in arbitrary chunks.

    Single threaded: one instance per connection.
    """

    def __init__(self, destination: int = INVALID_NID, source: int = INVALID_NID,
                 registry: CodecRegistry = DEFAULT_REGISTRY):
        self.destination = destination
        self.source = source
        self.registry = registry
        self._pending = bytearray()

    @property
    def buffered(self) -> int:
        return len(self._pending)

    def feed(self, chunk) -> list:
        if self._pending:
            self._pending += chunk
            data = self._pending
        else:
            data = chunk
        out = []
        pos = 0
        n = len(data)
        while True:
            try:
                msg, used = deserialize_message(data, pos, destination=self.destination,
                                                registry=self.registry)
            except Truncated:
                break
            msg.source = self.source
            out.append(msg)
            pos += used
            if pos == n:
                break
        rest = bytes(data[pos:]) if pos < n else b""
        self._pending = bytearray(rest)
        return out
