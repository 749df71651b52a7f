"""Local pool of single-use 16-byte initialization vectors."""

from __future__ import annotations

import os
import random
import secrets
import threading
from collections import deque
from dataclasses import dataclass
from typing import BinaryIO, NamedTuple, Protocol

from qgrid.errors import IVExhausted

IV_LEN = 16


@dataclass(frozen=True)
class InitVector:
    index: int
    value: bytes
    used: bool = True


class IVCounters(NamedTuple):
    added: int
    available: int
    used: int


class RandomSource(Protocol):
    def read(self, n: int) -> bytes: ...


class SystemRandomSource:
    """CSPRNG stand-in for the hardware QRNG."""

    def read(self, n: int) -> bytes:
        return secrets.token_bytes(n)


class StreamRandomSource:
    """Captured QRNG output read from a file or binary stream.

    Returns fewer bytes than requested once the capture runs out.
    """

    def __init__(self, source: str | os.PathLike | BinaryIO):
        self._fh = open(source, "rb") if isinstance(source, (str, os.PathLike)) else source

    def read(self, n: int) -> bytes:
        return self._fh.read(n)


class SeededRandomSource:
    """Reproducible bytes for simulations. Not suitable for real deployments."""

    def __init__(self, seed: int):
        self._rng = random.Random(seed)

    def read(self, n: int) -> bytes:
        return self._rng.randbytes(n)


class IVStore:
    def __init__(self, stats=None):
        self._pending: deque[InitVector] = deque()
        self._buffer = b""
        self._lock = threading.Lock()
        self.added = 0
        self.used = 0
        self.stats = stats

    def chunk(self, entropy: bytes) -> int:
        """Split ``entropy`` into IVs; a remainder shorter than 16 bytes is kept."""
        with self._lock:
            data = self._buffer + bytes(entropy)
            whole = len(data) - len(data) % IV_LEN
            for off in range(0, whole, IV_LEN):
                self._pending.append(InitVector(self.added, data[off : off + IV_LEN], False))
                self.added += 1
            self._buffer = data[whole:]
            count = whole // IV_LEN
        if self.stats is not None and count:
            self.stats.record("iv_added", count)
        return count

    def fill_from(self, source: RandomSource, count: int) -> int:
        return self.chunk(source.read(count * IV_LEN))

    def next_iv(self) -> InitVector:
        with self._lock:
            if not self._pending:
                raise IVExhausted("no unused initialization vectors", used=self.used)
            iv = self._pending.popleft()
            self.used += 1
        if self.stats is not None:
            self.stats.record("iv_used")
        return InitVector(iv.index, iv.value, True)

    @property
    def available(self) -> int:
        return len(self._pending)

    def counters(self) -> IVCounters:
        with self._lock:
            return IVCounters(self.added, self.added - self.used, self.used)
