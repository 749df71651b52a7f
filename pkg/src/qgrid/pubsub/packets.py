"""Control packets and their byte encoding for the stream transport.

Stream framing is ``len:u32be`` followed by the packet. A packet is::

    type:u8  flags:u8  packet_id:u16be  topic_len:u16be  topic  payload

``flags`` bit 0-1 hold the QoS, bit 3 the duplicate flag. CONNECT carries
the client id in the topic slot; CONNACK sets flags=1 (session accepted);
SUBACK carries the granted QoS in flags.
"""

from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass, replace

_HEAD = struct.Struct(">BBHH")
_LEN = struct.Struct(">I")
MAX_PACKET = 1 << 24


class PacketType(enum.IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    PUBREC = 5
    PUBREL = 6
    PUBCOMP = 7
    SUBSCRIBE = 8
    SUBACK = 9
    DISCONNECT = 14


@dataclass(frozen=True)
class Packet:
    type: PacketType
    packet_id: int = 0
    topic: str = ""
    payload: bytes = b""
    qos: int = 0
    dup: bool = False

    def as_dup(self) -> "Packet":
        return replace(self, dup=True)


def encode_packet(p: Packet) -> bytes:
    topic = p.topic.encode("utf-8")
    flags = (p.qos & 0x3) | (0x8 if p.dup else 0)
    return _HEAD.pack(p.type, flags, p.packet_id, len(topic)) + topic + p.payload


def decode_packet(data: bytes) -> Packet:
    if len(data) < _HEAD.size:
        raise ValueError("packet too short")
    ptype, flags, pid, tlen = _HEAD.unpack_from(data)
    end = _HEAD.size + tlen
    if len(data) < end:
        raise ValueError("topic runs past packet end")
    return Packet(
        PacketType(ptype),
        pid,
        data[_HEAD.size : end].decode("utf-8"),
        bytes(data[end:]),
        flags & 0x3,
        bool(flags & 0x8),
    )


def send_packet(sock: socket.socket, p: Packet) -> None:
    body = encode_packet(p)
    sock.sendall(_LEN.pack(len(body)) + body)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf.extend(chunk)
    return bytes(buf)


def recv_packet(sock: socket.socket) -> Packet:
    (length,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    if length > MAX_PACKET:
        raise ValueError(f"packet too large: {length}")
    return decode_packet(_recv_exact(sock, length))
