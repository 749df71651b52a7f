"""Deterministic in-process transport with scripted fault injection."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from qgrid.errors import BrokerUnavailable
from qgrid.pubsub.core import Broker, Client
from qgrid.pubsub.packets import Packet, PacketType

BROKER = "<broker>"


@dataclass
class Transmission:
    index: int
    src: str
    dst: str
    packet: Packet
    action: str


@dataclass
class FaultInjector:
    """Decides the fate of each transmission by its global index.

    ``delay`` maps an index to the number of later transmissions it is held
    behind. ``drop_if`` is consulted for packets not covered by the index
    schedule; it returns True to drop.
    """

    drop: set[int] = field(default_factory=set)
    duplicate: set[int] = field(default_factory=set)
    delay: dict[int, int] = field(default_factory=dict)
    drop_if: Callable[[Transmission], bool] | None = None

    def decide(self, tx: Transmission) -> str:
        if tx.index in self.drop:
            return "drop"
        if tx.index in self.duplicate:
            return "duplicate"
        if tx.index in self.delay:
            return "delay"
        if self.drop_if is not None and self.drop_if(tx):
            return "drop"
        return "deliver"


class _Link:
    def __init__(self, network: "Network", client_id: str):
        self.network = network
        self.client_id = client_id
        self.client: Client | None = None

    def open(self, client: Client) -> None:
        if not self.network.broker.running:
            raise BrokerUnavailable("broker is not running")
        self.client = client

    def _to_client(self, packet: Packet) -> None:
        client = self.client
        self.network.transmit(BROKER, self.client_id, packet, lambda: client.handle(packet))

    def send(self, packet: Packet) -> None:
        broker = self.network.broker

        def deliver():
            if packet.type is PacketType.CONNECT:
                if broker.running:
                    broker.attach(self.client_id, self._to_client)
            else:
                broker.handle(self.client_id, packet)

        self.network.transmit(self.client_id, BROKER, packet, deliver)

    def wait(self, predicate: Callable[[], bool], timeout: float) -> bool:
        self.network.run()
        return predicate()

    def close(self) -> None:
        self.network.broker.detach(self.client_id, self._to_client)


class Network:
    """Single-threaded packet scheduler between clients and one broker.

    Transmissions are queued and delivered in FIFO order by :meth:`run`,
    which is invoked automatically after every send unless ``autorun`` is
    False. Every transmission is logged with the fault action applied.
    """

    def __init__(self, broker: Broker | None = None, faults: FaultInjector | None = None, autorun: bool = True):
        self.broker = broker or Broker()
        self.faults = faults or FaultInjector()
        self.autorun = autorun
        self.log: list[Transmission] = []
        self.clients: list[Client] = []
        self._queue: deque[tuple[Callable[[], None], int]] = deque()
        self._held: list[tuple[int, Callable[[], None]]] = []
        self._running = False

    def client(self, client_id: str, on_message=None) -> Client:
        c = Client(client_id, _Link(self, client_id), on_message)
        self.clients.append(c)
        return c

    def transmit(self, src: str, dst: str, packet: Packet, deliver: Callable[[], None]) -> None:
        tx = Transmission(len(self.log), src, dst, packet, "deliver")
        tx.action = self.faults.decide(tx)
        self.log.append(tx)
        if tx.action == "delay":
            self._held.append((self.faults.delay[tx.index], deliver))
        elif tx.action != "drop":
            self._queue.append((deliver, tx.index))
            if tx.action == "duplicate":
                self._queue.append((deliver, tx.index))
        self._release_held()
        if self.autorun:
            self.run()

    def _release_held(self) -> None:
        still = []
        for remaining, deliver in self._held:
            if remaining <= 0:
                self._queue.append((deliver, -1))
            else:
                still.append((remaining - 1, deliver))
        self._held = still

    def run(self) -> int:
        """Deliver queued packets until the queue is empty."""
        if self._running:
            return 0
        self._running = True
        delivered = 0
        try:
            while self._queue or self._held:
                if not self._queue:
                    # nothing else in flight: release held packets
                    self._held = [(0, d) for _, d in self._held]
                    self._release_held()
                deliver, _ = self._queue.popleft()
                deliver()
                delivered += 1
        finally:
            self._running = False
        return delivered

    def pending(self) -> int:
        return self.broker.pending() + sum(c.pending() for c in self.clients if c.connected)

    def settle(self, max_rounds: int = 16) -> int:
        """Retransmit unacknowledged packets until every handshake completes.

        Returns the number of retry rounds used.
        """
        self.run()
        rounds = 0
        while self.pending() and rounds < max_rounds:
            for c in self.clients:
                c.retry()
            self.broker.retry()
            self.run()
            rounds += 1
        return rounds
