"""Length-prefixed packet transport over TCP for multi-process runs."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from typing import Callable

from qgrid.errors import BrokerUnavailable
from qgrid.pubsub.core import Broker, Client
from qgrid.pubsub.packets import Packet, PacketType, recv_packet, send_packet

log = logging.getLogger(__name__)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        broker: Broker = self.server.broker
        sock: socket.socket = self.request
        write_lock = threading.Lock()
        client_id = None

        def send(packet: Packet) -> None:
            try:
                with write_lock:
                    send_packet(sock, packet)
            except OSError:
                pass

        try:
            while True:
                packet = recv_packet(sock)
                if packet.type is PacketType.CONNECT:
                    client_id = packet.topic
                    broker.attach(client_id, send)
                elif client_id is not None:
                    broker.handle(client_id, packet)
        except (ConnectionError, OSError, ValueError):
            pass
        finally:
            if client_id is not None:
                broker.detach(client_id, send)


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class BrokerServer:
    """Runs a :class:`Broker` behind a TCP listener on a background thread."""

    def __init__(self, host: str = "127.0.0.1", port: int = 1883, retry_s: float = 2.0):
        self.broker = Broker()
        self.host = host
        self.port = port
        self.retry_s = retry_s
        self._server: _Server | None = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    def start(self) -> "BrokerServer":
        self._server = _Server((self.host, self.port), _Handler)
        self._server.broker = self.broker
        self.port = self._server.server_address[1]
        self.broker.start()
        self._stop.clear()
        for target in (self._server.serve_forever, self._retry_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def _retry_loop(self) -> None:
        while not self._stop.wait(self.retry_s):
            self.broker.retry(only_aged=True)

    def stop(self) -> None:
        self._stop.set()
        self.broker.stop()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class SocketTransport:
    def __init__(self, host: str = "127.0.0.1", port: int = 1883, connect_timeout: float = 2.0):
        self.host = host
        self.port = port
        self.connect_timeout = connect_timeout
        self._sock: socket.socket | None = None
        self._write_lock = threading.Lock()
        self._cond = threading.Condition()
        self._reader: threading.Thread | None = None

    def open(self, client: Client) -> None:
        try:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.connect_timeout)
        except OSError as exc:
            raise BrokerUnavailable(str(exc), addr=f"{self.host}:{self.port}") from exc
        self._sock.settimeout(None)
        self._reader = threading.Thread(target=self._read_loop, args=(client,), daemon=True)
        self._reader.start()

    def _read_loop(self, client: Client) -> None:
        try:
            while True:
                packet = recv_packet(self._sock)
                client.handle(packet)
                with self._cond:
                    self._cond.notify_all()
        except (ConnectionError, OSError, ValueError):
            client.connected = False
            with self._cond:
                self._cond.notify_all()

    def send(self, packet: Packet) -> None:
        if self._sock is None:
            return
        try:
            with self._write_lock:
                send_packet(self._sock, packet)
        except OSError as exc:
            log.warning("send failed: %s", exc)

    def wait(self, predicate: Callable[[], bool], timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        with self._cond:
            while not predicate():
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cond.wait(remaining)
        return True

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()
            self._sock = None


def socket_client(client_id: str, host: str = "127.0.0.1", port: int = 1883, on_message=None) -> Client:
    return Client(client_id, SocketTransport(host, port), on_message)


def parse_addr(addr: str, default_port: int = 1883) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host:
        return addr or "127.0.0.1", default_port
    return host, int(port)
