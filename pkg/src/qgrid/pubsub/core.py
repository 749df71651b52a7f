"""Transport-independent broker and client protocol logic.

QoS handling follows the usual three levels. QoS 1: the receiver delivers
every PUBLISH (duplicates included) and answers PUBACK; the sender resends
with the duplicate flag until acknowledged. QoS 2: the receiver delivers on
the first PUBLISH of a packet id and remembers the id until PUBREL, answering
PUBREC each time; the sender resends PUBLISH until PUBREC, then PUBREL until
PUBCOMP.

The broker never looks inside payloads.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable

from qgrid.errors import BrokerUnavailable, NotConnected
from qgrid.pubsub.packets import Packet, PacketType as T

log = logging.getLogger(__name__)

Send = Callable[[Packet], None]


@dataclass(frozen=True)
class Message:
    topic: str
    payload: bytes
    qos: int
    dup: bool = False


@dataclass
class _Inflight:
    packet: Packet
    state: T  # the ack we are waiting for: PUBACK, PUBREC or PUBCOMP
    aged: bool = False


class _QoSState:
    """Sender and receiver bookkeeping for one side of one link."""

    def __init__(self):
        self.outbound: dict[int, _Inflight] = {}
        self.awaiting_rel: set[int] = set()
        self._next_id = 0

    def allocate_id(self) -> int:
        for _ in range(0xFFFF):
            self._next_id = self._next_id % 0xFFFF + 1
            if self._next_id not in self.outbound:
                return self._next_id
        raise RuntimeError("no free packet ids")

    def start(self, packet: Packet) -> None:
        if packet.qos == 1:
            self.outbound[packet.packet_id] = _Inflight(packet, T.PUBACK)
        elif packet.qos == 2:
            self.outbound[packet.packet_id] = _Inflight(packet, T.PUBREC)

    def on_ack(self, packet: Packet, send: Send) -> None:
        entry = self.outbound.get(packet.packet_id)
        if packet.type is T.PUBREC:
            if entry is not None and entry.state in (T.PUBREC, T.PUBCOMP):
                entry.state = T.PUBCOMP
            send(Packet(T.PUBREL, packet.packet_id))
            return
        if entry is None or entry.state is not packet.type:
            return
        del self.outbound[packet.packet_id]

    def on_publish(self, packet: Packet, send: Send) -> bool:
        """Acknowledge an incoming PUBLISH; return True if it should be delivered."""
        if packet.qos == 0:
            return True
        if packet.qos == 1:
            send(Packet(T.PUBACK, packet.packet_id))
            return True
        fresh = packet.packet_id not in self.awaiting_rel
        self.awaiting_rel.add(packet.packet_id)
        send(Packet(T.PUBREC, packet.packet_id))
        return fresh

    def on_pubrel(self, packet: Packet, send: Send) -> None:
        self.awaiting_rel.discard(packet.packet_id)
        send(Packet(T.PUBCOMP, packet.packet_id))

    def retry(self, send: Send, only_aged: bool = False) -> int:
        """Resend everything in flight.

        With ``only_aged`` an entry is resent only if it was already in
        flight at the previous call, so a periodic timer never resends a
        packet younger than one period.
        """
        for entry in list(self.outbound.values()):
            if only_aged and not entry.aged:
                entry.aged = True
                continue
            if entry.state is T.PUBCOMP:
                send(Packet(T.PUBREL, entry.packet.packet_id))
            else:
                send(entry.packet.as_dup())
        return len(self.outbound)


@dataclass
class _Session:
    client_id: str
    send: Send
    subscriptions: dict[str, int] = field(default_factory=dict)
    qos: _QoSState = field(default_factory=_QoSState)
    active: bool = True


class Broker:
    """Topic router with exact-match filters and no retained messages."""

    def __init__(self):
        self.sessions: dict[str, _Session] = {}
        self.running = False
        self._lock = threading.RLock()
        self.relayed = 0

    def start(self) -> None:
        self.running = True

    def stop(self) -> None:
        with self._lock:
            self.running = False
            for s in self.sessions.values():
                s.active = False
            self.sessions.clear()

    def attach(self, client_id: str, send: Send) -> None:
        """Register a new link; supersedes any session with the same id."""
        with self._lock:
            if not self.running:
                raise BrokerUnavailable("broker is not running")
            old = self.sessions.get(client_id)
            if old is not None and old.active:
                old.active = False
                old.send(Packet(T.DISCONNECT))
            self.sessions[client_id] = _Session(client_id, send)
            send(Packet(T.CONNACK, qos=1))

    def detach(self, client_id: str, send: Send | None = None) -> None:
        with self._lock:
            s = self.sessions.get(client_id)
            if s is not None and (send is None or s.send is send):
                s.active = False
                del self.sessions[client_id]

    def handle(self, client_id: str, packet: Packet) -> None:
        with self._lock:
            s = self.sessions.get(client_id)
            if s is None or not s.active or not self.running:
                return
            t = packet.type
            if t is T.SUBSCRIBE:
                granted = min(packet.qos, 2)
                s.subscriptions[packet.topic] = granted
                s.send(Packet(T.SUBACK, packet.packet_id, packet.topic, qos=granted))
            elif t is T.PUBLISH:
                if s.qos.on_publish(packet, s.send):
                    self._route(packet)
            elif t is T.PUBREL:
                s.qos.on_pubrel(packet, s.send)
            elif t in (T.PUBACK, T.PUBREC, T.PUBCOMP):
                s.qos.on_ack(packet, s.send)
            elif t is T.DISCONNECT:
                self.detach(client_id)

    def _route(self, packet: Packet) -> None:
        for sub in list(self.sessions.values()):
            granted = sub.subscriptions.get(packet.topic)
            if granted is None or not sub.active:
                continue
            qos = min(packet.qos, granted)
            out = Packet(T.PUBLISH, sub.qos.allocate_id() if qos else 0, packet.topic, packet.payload, qos, packet.dup)
            sub.qos.start(out)
            self.relayed += 1
            sub.send(out)

    def retry(self, only_aged: bool = False) -> int:
        with self._lock:
            return sum(s.qos.retry(s.send, only_aged) for s in list(self.sessions.values()) if s.active)

    def pending(self) -> int:
        with self._lock:
            return sum(len(s.qos.outbound) for s in self.sessions.values())


@dataclass
class Receipt:
    packet_id: int
    qos: int
    _client: "Client"

    @property
    def complete(self) -> bool:
        return self.qos == 0 or self.packet_id not in self._client._qos.outbound


class Client:
    """Client endpoint. ``on_message(Message)`` is invoked per delivery."""

    def __init__(self, client_id: str, transport, on_message: Callable[[Message], None] | None = None, timeout: float = 5.0):
        self.client_id = client_id
        self.transport = transport
        self.on_message = on_message
        self.timeout = timeout
        self.connected = False
        self.connack = False
        self.granted: dict[str, int] = {}
        self.received: list[Message] = []
        self.keep_received = False
        self._qos = _QoSState()
        self._lock = threading.RLock()

    def connect(self) -> "Client":
        self.connack = False
        self.transport.open(self)
        self.transport.send(Packet(T.CONNECT, topic=self.client_id))
        if not self.transport.wait(lambda: self.connack, self.timeout):
            raise BrokerUnavailable("no CONNACK from broker", client_id=self.client_id)
        self.connected = True
        return self

    def disconnect(self) -> None:
        if self.connected:
            self.transport.send(Packet(T.DISCONNECT))
        self.connected = False
        self.transport.close()

    def _require(self) -> None:
        if not self.connected:
            raise NotConnected(f"client {self.client_id} is not connected")

    def subscribe(self, topic: str, qos: int = 0) -> int:
        if not topic:
            raise ValueError("topic filter must be non-empty")
        if qos not in (0, 1, 2):
            raise ValueError("qos must be 0, 1 or 2")
        self._require()
        with self._lock:
            pid = self._qos.allocate_id()
        self.transport.send(Packet(T.SUBSCRIBE, pid, topic, qos=qos))
        self.transport.wait(lambda: topic in self.granted, self.timeout)
        return self.granted.get(topic, qos)

    def publish(self, topic: str, payload: bytes, qos: int = 0) -> Receipt:
        if qos not in (0, 1, 2):
            raise ValueError("qos must be 0, 1 or 2")
        self._require()
        with self._lock:
            pid = self._qos.allocate_id() if qos else 0
            packet = Packet(T.PUBLISH, pid, topic, bytes(payload), qos)
            self._qos.start(packet)
        self.transport.send(packet)
        return Receipt(pid, qos, self)

    def handle(self, packet: Packet) -> None:
        """Process one packet arriving from the broker."""
        deliver = None
        with self._lock:
            t = packet.type
            if t is T.CONNACK:
                self.connack = bool(packet.qos)
            elif t is T.DISCONNECT:
                self.connected = False
            elif t is T.SUBACK:
                self.granted[packet.topic] = packet.qos
            elif t is T.PUBLISH:
                if self._qos.on_publish(packet, self.transport.send):
                    deliver = Message(packet.topic, packet.payload, packet.qos, packet.dup)
            elif t is T.PUBREL:
                self._qos.on_pubrel(packet, self.transport.send)
            elif t in (T.PUBACK, T.PUBREC, T.PUBCOMP):
                self._qos.on_ack(packet, self.transport.send)
        if deliver is not None:
            if self.keep_received:
                self.received.append(deliver)
            if self.on_message is not None:
                self.on_message(deliver)

    def retry(self, only_aged: bool = False) -> int:
        with self._lock:
            if not self.connected:
                return 0
            return self._qos.retry(self.transport.send, only_aged)

    def pending(self) -> int:
        return len(self._qos.outbound)
