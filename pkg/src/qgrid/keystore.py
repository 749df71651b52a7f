"""Shared key table with odd/even partitioning and reserve-pool gating."""

from __future__ import annotations

import bisect
import enum
import os
import threading
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from qgrid.errors import AlreadyConsumed, NoKeyEver, UnknownSerial
from qgrid.keyframe import KEY_LEN, KeyFrame

DEFAULT_THRESHOLD = 30


class PartyRole(enum.Enum):
    ODD = 1
    EVEN = 0

    def owns(self, serial: int) -> bool:
        return serial % 2 == self.value

    @property
    def other(self) -> "PartyRole":
        return PartyRole.EVEN if self is PartyRole.ODD else PartyRole.ODD


@dataclass(frozen=True)
class PoolPolicy:
    """Reserve-pool gate for advancing to a fresh signing key.

    ``threshold`` bounds the whole table. ``partition_reserve`` bounds the
    party's own unused keys (default ``threshold // 2``): without it a party
    that has drained its parity would advance to a key delivered by the
    latest poll, which the peer may not have polled yet.
    """

    threshold: int = DEFAULT_THRESHOLD
    partition_reserve: int | None = None

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.partition_reserve is None:
            object.__setattr__(self, "partition_reserve", self.threshold // 2)
        if self.partition_reserve < 0:
            raise ValueError("partition_reserve must be >= 0")


@dataclass
class KeyRecord:
    serial: int
    secret: bytes
    used: bool = False
    used_for: str | None = None  # "sign" or "verify"


class SigningKey(NamedTuple):
    serial: int
    secret: bytes
    fresh: bool
    unused_before: int


class Counters(NamedTuple):
    added: int
    available: int
    used: int


@dataclass
class _Cursor:
    last: KeyRecord | None = None
    fresh_serials: list[int] = field(default_factory=list)


class KeyStore:
    """In-memory key table, internally synchronized.

    ``stats`` (optional) receives ``key_added``/``key_rejected``/``key_used``
    events. ``journal`` (optional path) gets one ``ADD``/``USE`` line per event
    and can be replayed with :meth:`apply_journal` after a restart.
    """

    def __init__(self, stats=None, journal: str | os.PathLike | None = None):
        self._keys: dict[int, KeyRecord] = {}
        self._unused: dict[PartyRole, list[int]] = {PartyRole.ODD: [], PartyRole.EVEN: []}
        self._lock = threading.RLock()
        self._cursors = {PartyRole.ODD: _Cursor(), PartyRole.EVEN: _Cursor()}
        self.added = 0
        self.used = 0
        self.rejected_length = 0
        self.rejected_duplicate = 0
        self.rejected_status = 0
        self.stats = stats
        self.journal = journal

    # ingestion -----------------------------------------------------------

    def ingest(self, frames: Iterable[KeyFrame]) -> int:
        added = 0
        journal_lines = []
        with self._lock:
            for frame in frames:
                if len(frame.key_data) != KEY_LEN:
                    self.rejected_length += 1
                    self._emit("key_rejected")
                    continue
                if frame.key_status & 1:
                    self.rejected_status += 1
                    self._emit("key_rejected")
                    continue
                if frame.key_id in self._keys:
                    self.rejected_duplicate += 1
                    self._emit("key_rejected")
                    continue
                self._keys[frame.key_id] = KeyRecord(frame.key_id, bytes(frame.key_data))
                self._insert_unused(frame.key_id)
                self.added += 1
                added += 1
                journal_lines.append(f"ADD {frame.key_id}\n")
            self._emit("key_added", added)
            self._journal(journal_lines)
        return added

    def _insert_unused(self, serial: int) -> None:
        pool = self._unused[PartyRole.ODD if serial % 2 else PartyRole.EVEN]
        # frames normally arrive in serial order; keep the list sorted regardless
        if not pool or pool[-1] < serial:
            pool.append(serial)
        else:
            bisect.insort(pool, serial)

    # signing -------------------------------------------------------------

    def next_signing_key(self, role: PartyRole, policy: PoolPolicy = PoolPolicy()) -> SigningKey:
        """Pick the key for the next outgoing MAC.

        Advances to the lowest unused serial of ``role``'s parity only while
        the table holds more than ``policy.threshold`` unused keys and the
        party more than ``policy.partition_reserve`` of its own; otherwise
        the previous key is handed out again (``fresh=False``), which is safe
        only because every MAC gets a new IV.
        """
        with self._lock:
            unused = self.unused_count
            cursor = self._cursors[role]
            own = self._unused[role]
            if unused > policy.threshold and len(own) > policy.partition_reserve and own:
                serial = own.pop(0)
                rec = self._keys[serial]
                self._mark_used(rec, "sign")
                cursor.last = rec
                cursor.fresh_serials.append(serial)
                return SigningKey(serial, rec.secret, True, unused)
            if cursor.last is None:
                raise NoKeyEver(
                    "no signing key has been issued and the pool is at or below the reserve",
                    unused=unused,
                    threshold=policy.threshold,
                )
            return SigningKey(cursor.last.serial, cursor.last.secret, False, unused)

    def fresh_history(self, role: PartyRole) -> list[int]:
        with self._lock:
            return list(self._cursors[role].fresh_serials)

    def last_signing_serial(self, role: PartyRole) -> int | None:
        last = self._cursors[role].last
        return None if last is None else last.serial

    # verification --------------------------------------------------------

    def lookup_for_verify(self, serial: int, current: int | None = None) -> bytes:
        """Return the secret for ``serial`` without consuming it.

        ``current`` is the serial the counterpart is known to be reusing; that
        one key may be looked up again after it was consumed.
        """
        with self._lock:
            rec = self._keys.get(serial)
            if rec is None:
                raise UnknownSerial(f"serial {serial} not in key table", serial=serial)
            if rec.used and serial != current:
                raise AlreadyConsumed(f"serial {serial} already consumed", serial=serial)
            return rec.secret

    def mark_verified(self, serial: int) -> None:
        with self._lock:
            rec = self._keys.get(serial)
            if rec is None:
                raise UnknownSerial(f"serial {serial} not in key table", serial=serial)
            if rec.used:
                return
            self._unused[PartyRole.ODD if serial % 2 else PartyRole.EVEN].remove(serial)
            self._mark_used(rec, "verify")

    def _mark_used(self, rec: KeyRecord, purpose: str) -> None:
        rec.used = True
        rec.used_for = purpose
        self.used += 1
        self._emit("key_used")
        self._journal([f"USE {rec.serial} {purpose}\n"])

    # counters ------------------------------------------------------------

    @property
    def unused_count(self) -> int:
        return len(self._unused[PartyRole.ODD]) + len(self._unused[PartyRole.EVEN])

    @property
    def rejected(self) -> int:
        return self.rejected_length + self.rejected_duplicate + self.rejected_status

    def counters(self) -> Counters:
        with self._lock:
            return Counters(self.added, self.added - self.used, self.used)

    def partition_available(self, role: PartyRole) -> int:
        """Unused keys this party may still sign with."""
        with self._lock:
            return len(self._unused[role])

    def __contains__(self, serial: int) -> bool:
        return serial in self._keys

    def __len__(self) -> int:
        return len(self._keys)

    def record(self, serial: int) -> KeyRecord:
        return self._keys[serial]

    # persistence ---------------------------------------------------------

    def _emit(self, event: str, n: int = 1) -> None:
        if self.stats is not None and n:
            self.stats.record(event, n)

    def _journal(self, lines: list[str]) -> None:
        if self.journal is None or not lines:
            return
        with open(self.journal, "a", encoding="ascii") as fh:
            fh.writelines(lines)

    def apply_journal(self, path: str | os.PathLike) -> int:
        """Re-apply ``USE`` events from a journal to keys already ingested.

        Returns the number of keys newly marked used. ``ADD`` lines are
        informational; key material itself is re-read from the key file.
        """
        marked = 0
        with self._lock, open(path, encoding="ascii") as fh:
            saved, self.journal = self.journal, None
            try:
                for line in fh:
                    parts = line.split()
                    if len(parts) != 3 or parts[0] != "USE":
                        continue
                    serial = int(parts[1])
                    rec = self._keys.get(serial)
                    if rec is None or rec.used:
                        continue
                    self._unused[PartyRole.ODD if serial % 2 else PartyRole.EVEN].remove(serial)
                    self._mark_used(rec, parts[2])
                    if parts[2] == "sign":
                        role = PartyRole.ODD if serial % 2 else PartyRole.EVEN
                        self._cursors[role].last = rec
                    marked += 1
            finally:
                self.journal = saved
        return marked
