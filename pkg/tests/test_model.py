import struct

import pytest
from hypothesis import given, strategies as st

from dxnet.errors import CapacityExceeded, MalformedHeader, Truncated
from dxnet.model import (HEADER_SIZE, CodecRegistry, Message, MessageType, ObjectCodec,
                         StreamDecoder, deserialize_message, encode_message, serialize_message,
                         size_of)

OBJ = 1
REG = CodecRegistry()
REG.register(OBJ, ObjectCodec())


def oracle_size(v):
    """Byte count of the tagged payload format, written field by field."""
    if v is None or isinstance(v, bool):
        return 1
    if isinstance(v, (int, float)):
        return 1 + 8
    if isinstance(v, bytes):
        return 1 + 4 + len(v)
    if isinstance(v, str):
        return 1 + 4 + len(v.encode())
    if isinstance(v, (list, tuple)):
        return 1 + 4 + sum(map(oracle_size, v))
    return 1 + 4 + sum(oracle_size(k) + oracle_size(x) for k, x in v.items())


scalars = (st.none() | st.booleans() | st.integers(-2**63, 2**63 - 1)
           | st.floats(allow_nan=False) | st.binary(max_size=40) | st.text(max_size=20))
values = st.recursive(
    scalars,
    lambda kids: (st.lists(kids, max_size=5) | st.tuples(kids, kids)
                  | st.dictionaries(st.text(max_size=5) | st.integers(-2**63, 2**63 - 1), kids, max_size=4)),
    max_leaves=25)
messages = st.builds(
    lambda t, mid, p, dst: Message.create(dst, OBJ, p, msg_type=t, message_id=mid),
    st.sampled_from(MessageType), st.integers(0, 2**32 - 1), values, st.integers(0, 0xFFFE))


def test_header_only_message_is_16_bytes():
    buf = bytearray(64)
    assert serialize_message(Message.create(1, 0, b""), buf) == 16
    assert size_of(Message.create(1, 0, b"")) == 16


def test_flat_64_byte_payload():
    buf = bytearray(128)
    msg = Message.create(1, 0, bytes(range(64)))
    assert serialize_message(msg, buf) == 80
    assert size_of(msg) == 80


def test_nested_payload_size_matches_field_oracle():
    payload = (7, ["a", "bb", "ccc"])
    expected = HEADER_SIZE + oracle_size(payload)
    assert expected == 56
    msg = Message.create(1, OBJ, payload)
    assert serialize_message(msg, bytearray(100), REG) == 56
    assert size_of(msg, REG) == 56


def test_header_layout():
    msg = Message.create(3, 0x1234, b"xyz", msg_type=MessageType.REQUEST, message_id=0xDEADBEEF)
    raw = encode_message(msg)
    assert struct.unpack_from("<BBHIII", raw) == (1, 0, 0x1234, 0xDEADBEEF, 3, 0)
    assert raw[16:] == b"xyz"


def test_region_too_small_writes_nothing():
    buf = bytearray(b"\xAA" * 20)
    with pytest.raises(CapacityExceeded):
        serialize_message(Message.create(1, 0, bytes(10)), buf)
    assert buf == b"\xAA" * 20


def test_serialize_into_wrapped_segments():
    msg = Message.create(1, OBJ, {"k": [1, 2.5, None]})
    n = size_of(msg, REG)
    ring = bytearray(n)
    view = memoryview(ring)
    split = 7
    serialize_message(msg, [view[n - split:], view[:n - split]], REG)
    linear = bytes(ring[n - split:]) + bytes(ring[:n - split])
    assert linear == encode_message(msg, REG)


def test_malformed_msg_type():
    raw = bytearray(encode_message(Message.create(1, 0, b"ab")))
    raw[0] = 0x7F
    with pytest.raises(MalformedHeader):
        deserialize_message(raw)


def test_split_inside_header_is_truncated_then_completes():
    raw = encode_message(Message.create(2, 0, b"payload"))
    with pytest.raises(Truncated):
        deserialize_message(raw[:7])
    dec = StreamDecoder(destination=2)
    assert dec.feed(raw[:7]) == []
    (msg,) = dec.feed(raw[7:])
    assert msg.payload == b"payload"


def test_split_at_every_offset():
    msgs = [Message.create(5, OBJ, [i, "x" * i]) for i in range(3)]
    raw = b"".join(encode_message(m, REG) for m in msgs)
    for cut in range(1, len(raw)):
        dec = StreamDecoder(5, 9, REG)
        out = dec.feed(raw[:cut]) + dec.feed(raw[cut:])
        assert out == msgs
        assert all(m.source == 9 for m in out)
        assert dec.buffered == 0


@given(messages)
def test_round_trip(msg):
    raw = encode_message(msg, REG)
    back, used = deserialize_message(raw, destination=msg.destination, registry=REG)
    assert used == len(raw)
    assert back == msg


@given(messages)
def test_size_of_equals_serialized_length(msg):
    assert size_of(msg, REG) == len(encode_message(msg, REG))
    assert size_of(msg, REG) == HEADER_SIZE + oracle_size(msg.payload)


@given(st.lists(messages, min_size=1, max_size=8), st.data())
def test_rechunked_stream_round_trip(msgs, data):
    msgs = [Message(7, m.header, m.payload) for m in msgs]
    raw = b"".join(encode_message(m, REG) for m in msgs)
    cuts = sorted(data.draw(st.sets(st.integers(1, max(1, len(raw) - 1)), max_size=10)))
    dec = StreamDecoder(7, 1, REG)
    out, prev = [], 0
    for c in cuts + [len(raw)]:
        out += dec.feed(raw[prev:c])
        prev = c
    assert out == msgs
