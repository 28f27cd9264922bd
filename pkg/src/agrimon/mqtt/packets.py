"""MQTT 3.1.1 control packets (the subset used by the monitoring network).

Supported: CONNECT/CONNACK, PUBLISH at qos 0-1, PUBACK, SUBSCRIBE/SUBACK,
PINGREQ/PINGRESP and DISCONNECT. Packets are immutable dataclasses;
``encode_packet`` and ``decode_packet`` convert to and from wire octets.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Union

from agrimon.errors import InvariantViolation, Malformed, Truncated
from agrimon.kernels import decode_remaining_length, encode_remaining_length
from agrimon.mqtt.topics import valid_filter, valid_topic

PROTOCOL_NAME = "MQTT"
PROTOCOL_LEVEL = 4

CONNECT = 1
CONNACK = 2
PUBLISH = 3
PUBACK = 4
SUBSCRIBE = 8
SUBACK = 9
PINGREQ = 12
PINGRESP = 13
DISCONNECT = 14

SUBACK_FAILURE = 0x80


@dataclass(frozen=True)
class Connect:
    client_id: str
    keep_alive: int = 60
    clean_session: bool = True


@dataclass(frozen=True)
class ConnAck:
    return_code: int = 0
    session_present: bool = False


@dataclass(frozen=True)
class Publish:
    topic: str
    payload: bytes = b""
    qos: int = 0
    packet_id: int | None = None
    dup: bool = False
    retain: bool = False


@dataclass(frozen=True)
class PubAck:
    packet_id: int


@dataclass(frozen=True)
class Subscribe:
    packet_id: int
    filters: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class SubAck:
    packet_id: int
    granted: tuple[int, ...]


@dataclass(frozen=True)
class PingReq:
    pass


@dataclass(frozen=True)
class PingResp:
    pass


@dataclass(frozen=True)
class Disconnect:
    pass


Packet = Union[Connect, ConnAck, Publish, PubAck, Subscribe, SubAck, PingReq, PingResp, Disconnect]


# -- primitives -----------------------------------------------------------------


def _encode_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise InvariantViolation("string longer than 65535 octets")
    if "\x00" in s:
        raise InvariantViolation("string contains U+0000")
    return struct.pack(">H", len(raw)) + raw


def _decode_str(body: bytes, pos: int) -> tuple[str, int]:
    if pos + 2 > len(body):
        raise Malformed("string length runs past packet end")
    (n,) = struct.unpack_from(">H", body, pos)
    end = pos + 2 + n
    if end > len(body):
        raise Malformed("string runs past packet end")
    try:
        s = body[pos + 2 : end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise Malformed(f"invalid UTF-8 string: {exc}") from None
    if "\x00" in s:
        raise Malformed("string contains U+0000")
    return s, end


def _check_packet_id(pid) -> None:
    if not isinstance(pid, int) or not 1 <= pid <= 0xFFFF:
        raise InvariantViolation(f"packet id {pid!r} outside 1..65535")


def _fixed(ptype: int, flags: int, body: bytes) -> bytes:
    return bytes([(ptype << 4) | flags]) + encode_remaining_length(len(body)) + body


# -- encode ---------------------------------------------------------------------


def encode_packet(p: Packet) -> bytes:
    if isinstance(p, Publish):
        if p.qos not in (0, 1):
            raise InvariantViolation(f"qos {p.qos} unsupported")
        if not valid_topic(p.topic):
            raise InvariantViolation(f"invalid topic name {p.topic!r}")
        if p.qos == 0:
            if p.packet_id is not None:
                raise InvariantViolation("qos 0 publish carries a packet id")
            if p.dup:
                raise InvariantViolation("qos 0 publish has DUP set")
            vh = _encode_str(p.topic)
        else:
            _check_packet_id(p.packet_id)
            vh = _encode_str(p.topic) + struct.pack(">H", p.packet_id)
        flags = (p.dup << 3) | (p.qos << 1) | int(p.retain)
        return _fixed(PUBLISH, flags, vh + bytes(p.payload))
    if isinstance(p, PubAck):
        _check_packet_id(p.packet_id)
        return _fixed(PUBACK, 0, struct.pack(">H", p.packet_id))
    if isinstance(p, Connect):
        if not 0 <= p.keep_alive <= 0xFFFF:
            raise InvariantViolation("keep_alive must fit 16 bits")
        flags = 0x02 if p.clean_session else 0x00
        body = (
            _encode_str(PROTOCOL_NAME)
            + bytes([PROTOCOL_LEVEL, flags])
            + struct.pack(">H", p.keep_alive)
            + _encode_str(p.client_id)
        )
        return _fixed(CONNECT, 0, body)
    if isinstance(p, ConnAck):
        if not 0 <= p.return_code <= 5:
            raise InvariantViolation(f"CONNACK return code {p.return_code} undefined")
        if p.session_present and p.return_code:
            raise InvariantViolation("session_present set on a refused CONNACK")
        return _fixed(CONNACK, 0, bytes([int(p.session_present), p.return_code]))
    if isinstance(p, Subscribe):
        _check_packet_id(p.packet_id)
        if not p.filters:
            raise InvariantViolation("SUBSCRIBE without filters")
        body = bytearray(struct.pack(">H", p.packet_id))
        for topic_filter, qos in p.filters:
            if not valid_filter(topic_filter):
                raise InvariantViolation(f"invalid topic filter {topic_filter!r}")
            if qos not in (0, 1, 2):
                raise InvariantViolation(f"requested qos {qos} invalid")
            body += _encode_str(topic_filter) + bytes([qos])
        return _fixed(SUBSCRIBE, 0x02, bytes(body))
    if isinstance(p, SubAck):
        _check_packet_id(p.packet_id)
        if not p.granted or any(g not in (0, 1, 2, SUBACK_FAILURE) for g in p.granted):
            raise InvariantViolation(f"bad SUBACK codes {p.granted!r}")
        return _fixed(SUBACK, 0, struct.pack(">H", p.packet_id) + bytes(p.granted))
    if isinstance(p, PingReq):
        return b"\xc0\x00"
    if isinstance(p, PingResp):
        return b"\xd0\x00"
    if isinstance(p, Disconnect):
        return b"\xe0\x00"
    raise InvariantViolation(f"not an MQTT packet: {p!r}")


# -- decode ---------------------------------------------------------------------


def decode_packet(buf: bytes) -> tuple[Packet, int]:
    """Decode one packet from the front of *buf*.

    Returns ``(packet, consumed)``; octets after the packet are left alone.
    Raises ``Truncated`` when *buf* holds only part of a packet and
    ``Malformed`` on a protocol violation.
    """
    if not buf:
        raise Truncated("empty buffer")
    first = buf[0]
    ptype, flags = first >> 4, first & 0x0F
    length, used = decode_remaining_length(buf, 1)
    start = 1 + used
    end = start + length
    if end > len(buf):
        raise Truncated(f"need {end} octets, have {len(buf)}")
    body = bytes(buf[start:end])
    return _decode_body(ptype, flags, body), end


def _decode_body(ptype: int, flags: int, body: bytes) -> Packet:
    if ptype == PUBLISH:
        dup, qos, retain = bool(flags & 0x08), (flags >> 1) & 0x03, bool(flags & 0x01)
        if qos == 3:
            raise Malformed("PUBLISH with qos 3")
        if qos == 2:
            raise Malformed("qos 2 is not supported")
        if dup and qos == 0:
            raise Malformed("qos 0 PUBLISH with DUP set")
        topic, pos = _decode_str(body, 0)
        if not valid_topic(topic):
            raise Malformed(f"invalid topic name {topic!r}")
        packet_id = None
        if qos:
            if pos + 2 > len(body):
                raise Malformed("PUBLISH missing packet id")
            (packet_id,) = struct.unpack_from(">H", body, pos)
            if packet_id == 0:
                raise Malformed("packet id 0")
            pos += 2
        return Publish(topic, body[pos:], qos, packet_id, dup, retain)

    if ptype == SUBSCRIBE and flags != 0x02:
        raise Malformed("SUBSCRIBE fixed-header flags must be 0010")
    if ptype != SUBSCRIBE and flags != 0:
        raise Malformed(f"reserved flags {flags:#x} set on packet type {ptype}")

    if ptype == PUBACK:
        return PubAck(_single_id(body, "PUBACK"))
    if ptype == CONNECT:
        return _decode_connect(body)
    if ptype == CONNACK:
        if len(body) != 2:
            raise Malformed("CONNACK must have remaining length 2")
        if body[0] & 0xFE:
            raise Malformed("CONNACK acknowledge flags reserved bits set")
        if body[1] > 5:
            raise Malformed(f"CONNACK return code {body[1]} undefined")
        return ConnAck(body[1], bool(body[0] & 1))
    if ptype == SUBSCRIBE:
        if len(body) < 2:
            raise Malformed("SUBSCRIBE missing packet id")
        (pid,) = struct.unpack_from(">H", body, 0)
        if pid == 0:
            raise Malformed("packet id 0")
        pos = 2
        filters = []
        while pos < len(body):
            topic_filter, pos = _decode_str(body, pos)
            if pos >= len(body):
                raise Malformed("SUBSCRIBE filter without qos octet")
            qos = body[pos]
            pos += 1
            if qos > 2:
                raise Malformed(f"requested qos octet {qos:#x} invalid")
            if not valid_filter(topic_filter):
                raise Malformed(f"invalid topic filter {topic_filter!r}")
            filters.append((topic_filter, qos))
        if not filters:
            raise Malformed("SUBSCRIBE without filters")
        return Subscribe(pid, tuple(filters))
    if ptype == SUBACK:
        if len(body) < 3:
            raise Malformed("SUBACK too short")
        (pid,) = struct.unpack_from(">H", body, 0)
        if pid == 0:
            raise Malformed("packet id 0")
        granted = tuple(body[2:])
        if any(g not in (0, 1, 2, SUBACK_FAILURE) for g in granted):
            raise Malformed("SUBACK return code undefined")
        return SubAck(pid, granted)
    if ptype in (PINGREQ, PINGRESP, DISCONNECT):
        if body:
            raise Malformed(f"packet type {ptype} must have an empty body")
        return {PINGREQ: PingReq, PINGRESP: PingResp, DISCONNECT: Disconnect}[ptype]()
    if ptype in (0, 15):
        raise Malformed(f"reserved packet type {ptype}")
    raise Malformed(f"packet type {ptype} not supported")


def _single_id(body: bytes, name: str) -> int:
    if len(body) != 2:
        raise Malformed(f"{name} must have remaining length 2")
    (pid,) = struct.unpack(">H", body)
    if pid == 0:
        raise Malformed("packet id 0")
    return pid


def _decode_connect(body: bytes) -> Connect:
    name, pos = _decode_str(body, 0)
    if name != PROTOCOL_NAME:
        raise Malformed(f"protocol name {name!r}")
    if pos + 4 > len(body):
        raise Malformed("CONNECT variable header truncated")
    level, cflags = body[pos], body[pos + 1]
    (keep_alive,) = struct.unpack_from(">H", body, pos + 2)
    pos += 4
    if level != PROTOCOL_LEVEL:
        raise Malformed(f"protocol level {level} unsupported")
    if cflags & 0x01:
        raise Malformed("CONNECT reserved flag set")
    if cflags & 0xFC:
        # will, username and password are outside the supported subset
        raise Malformed("CONNECT will/username/password not supported")
    client_id, pos = _decode_str(body, pos)
    if pos != len(body):
        raise Malformed("trailing octets after CONNECT payload")
    return Connect(client_id, keep_alive, bool(cflags & 0x02))


class StreamDecoder:
    """Incremental decoder for a byte stream carrying back-to-back packets."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Packet]:
        self._buf += data
        out = []
        while self._buf:
            try:
                packet, used = decode_packet(self._buf)
            except Truncated:
                break
            del self._buf[:used]
            out.append(packet)
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)
