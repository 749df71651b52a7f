"""Per-node operational counters, snapshots, and export."""

from __future__ import annotations

import csv
import json
import os
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from qgrid.errors import ExportError

# Kept in sync with authcodec.Reason, minus OK; stats must not import authcodec.
FAIL_REASONS = (
    "MAC_MISMATCH",
    "TOPIC_MISMATCH",
    "STALE_TIMESTAMP",
    "KEY_REPLAYED",
    "UNKNOWN_KEY",
    "MALFORMED",
)

CSV_COLUMNS = (
    "node_id",
    "t_ms",
    "keys_added",
    "keys_available",
    "keys_used",
    "ivs_added",
    "ivs_available",
    "ivs_used",
    "verify_ok",
    "verify_fail",
    *FAIL_REASONS,
)

EVENTS = (
    "key_added",
    "key_rejected",
    "key_used",
    "iv_added",
    "iv_used",
    "verify_ok",
    "verify_fail",
    "publish_ok",
    "publish_blocked",
)


@dataclass(frozen=True)
class StatsSnapshot:
    node_id: str
    t_ms: int
    keys_added: int = 0
    keys_available: int = 0
    keys_used: int = 0
    ivs_added: int = 0
    ivs_available: int = 0
    ivs_used: int = 0
    verify_ok: int = 0
    verify_fail: int = 0
    fail_reasons: dict[str, int] = field(default_factory=dict)
    keys_rejected: int = 0
    publish_ok: int = 0
    publish_blocked: int = 0

    def conserved(self) -> bool:
        return (
            self.keys_added == self.keys_available + self.keys_used
            and self.ivs_added == self.ivs_available + self.ivs_used
            and self.verify_fail == sum(self.fail_reasons.values())
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StatsSnapshot":
        return cls(**json.loads(text))


class Stats:
    """Thread-safe event counters.

    ``keys_added`` counts keys accepted into the table; rejected keys are kept
    in their own counter, so ``keys_added == keys_available + keys_used``.
    """

    def __init__(self, start_ms: int = 0):
        self._lock = threading.Lock()
        self._counts: Counter[str] = Counter()
        self._reasons: Counter[str] = Counter()
        self.start_ms = start_ms

    def record(self, event: str, n: int = 1, reason: str | None = None) -> None:
        if event not in EVENTS:
            raise ValueError(f"unknown stats event {event!r}")
        with self._lock:
            self._counts[event] += n
            if event == "verify_fail":
                self._reasons[reason or "UNSPECIFIED"] += n

    def get(self, event: str) -> int:
        with self._lock:
            return self._counts[event]

    def snapshot(self, node_id: str, clock) -> StatsSnapshot:
        now = clock.now_ms()
        with self._lock:
            c = self._counts
            return StatsSnapshot(
                node_id=node_id,
                t_ms=now - self.start_ms,
                keys_added=c["key_added"],
                keys_available=c["key_added"] - c["key_used"],
                keys_used=c["key_used"],
                ivs_added=c["iv_added"],
                ivs_available=c["iv_added"] - c["iv_used"],
                ivs_used=c["iv_used"],
                verify_ok=c["verify_ok"],
                verify_fail=c["verify_fail"],
                fail_reasons=dict(self._reasons),
                keys_rejected=c["key_rejected"],
                publish_ok=c["publish_ok"],
                publish_blocked=c["publish_blocked"],
            )


def _csv_row(s: StatsSnapshot) -> list:
    base = [getattr(s, col) for col in CSV_COLUMNS[:10]]
    return base + [s.fail_reasons.get(r, 0) for r in FAIL_REASONS]


def export(series: Sequence[StatsSnapshot], path: str | os.PathLike, fmt: str = "csv") -> None:
    """Write snapshots as CSV (``CSV_COLUMNS`` order) or JSON lines.

    Nothing is created for an empty series; a failed write removes the
    partial file.
    """
    if not series:
        raise ExportError("empty snapshot series")
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unknown export format {fmt!r}")
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if fmt == "csv":
                writer = csv.writer(fh)
                writer.writerow(CSV_COLUMNS)
                writer.writerows(_csv_row(s) for s in series)
            else:
                for s in series:
                    fh.write(s.to_json() + "\n")
    except OSError as exc:
        if os.path.exists(path):
            os.unlink(path)
        raise ExportError(str(exc), path=str(path)) from exc


def load_jsonl(path: str | os.PathLike) -> list[StatsSnapshot]:
    with open(path, encoding="utf-8") as fh:
        return [StatsSnapshot.from_json(line) for line in fh if line.strip()]


def load_csv(path: str | os.PathLike) -> list[StatsSnapshot]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            reasons = {r: int(row[r]) for r in FAIL_REASONS if int(row[r])}
            out.append(
                StatsSnapshot(
                    node_id=row["node_id"],
                    **{col: int(row[col]) for col in CSV_COLUMNS[1:10]},
                    fail_reasons=reasons,
                )
            )
    return out


class StatsCollector:
    """Central statistics sink fed over the message bus on ``stats/<node>``."""

    TOPIC_PREFIX = "stats/"

    def __init__(self):
        self.series: dict[str, list[StatsSnapshot]] = {}

    def on_message(self, topic: str, payload: bytes) -> None:
        snap = StatsSnapshot.from_json(payload.decode("utf-8"))
        self.series.setdefault(snap.node_id, []).append(snap)

    def attach(self, client, nodes: Iterable[str]) -> None:
        for node in nodes:
            client.subscribe(self.TOPIC_PREFIX + node, 0)
