"""The Intelligence and PV agents: periodic authenticated publishing."""

from __future__ import annotations

import enum
import json
import logging
import random
from dataclasses import dataclass, field

from qgrid.authcodec import FreshnessPolicy, Reason, Signer, Verifier
from qgrid.errors import ConfigError, IVExhausted, NoKeyEver
from qgrid.ivstore import IVStore
from qgrid.keyframe import KeyFileReader
from qgrid.keystore import KeyStore, PartyRole, PoolPolicy
from qgrid.pubsub import Message
from qgrid.stats import Stats, StatsCollector

log = logging.getLogger(__name__)

CONTROL_TOPIC = "PV/Control"
MEASUREMENT_TOPIC = "PV/Measurement"
HELLO = b"HELLO"


class AgentRole(enum.Enum):
    INTEL = "INTEL"
    PV = "PV"


# (topic, schedule, kind) for each role's outgoing messages
PUBLICATIONS = {
    AgentRole.INTEL: [(CONTROL_TOPIC, "slow", "control")],
    AgentRole.PV: [(MEASUREMENT_TOPIC, "fast", "measurement"), (MEASUREMENT_TOPIC, "slow", "forecast")],
}
SUBSCRIPTIONS = {AgentRole.INTEL: [MEASUREMENT_TOPIC], AgentRole.PV: [CONTROL_TOPIC]}
DEFAULT_PARTY = {AgentRole.INTEL: PartyRole.ODD, AgentRole.PV: PartyRole.EVEN}


@dataclass
class AgentConfig:
    role: AgentRole
    name: str = ""
    party: PartyRole | None = None
    fast_period_ms: int = 1000
    slow_period_ms: int = 5000
    stats_period_ms: int = 5000
    key_poll_ms: int = 5000
    poll_offset_ms: int = 0
    skew_ms: int = 0
    qos: int = 1
    topics_pub: list[str] = field(default_factory=list)
    topics_sub: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.role = AgentRole(self.role)
        if self.party is None:
            self.party = DEFAULT_PARTY[self.role]
        elif not isinstance(self.party, PartyRole):
            self.party = PartyRole[str(self.party)]
        self.name = self.name or self.role.value.lower()
        self.topics_pub = self.topics_pub or sorted({t for t, _, _ in PUBLICATIONS[self.role]})
        self.topics_sub = self.topics_sub or list(SUBSCRIPTIONS[self.role])
        for attr in ("fast_period_ms", "slow_period_ms", "stats_period_ms", "key_poll_ms"):
            if getattr(self, attr) <= 0:
                raise ConfigError(f"{attr} must be positive", field=attr)
        if self.fast_period_ms >= self.slow_period_ms:
            raise ConfigError("fast_period_ms must be below slow_period_ms", field="fast_period_ms")
        if self.qos not in (0, 1, 2):
            raise ConfigError("qos must be 0, 1 or 2", field="qos")


class Agent:
    """One network node.

    Time is driven from outside through :meth:`tick`; incoming messages
    arrive through :meth:`on_message`, possibly from another thread.
    """

    IV_LOW_WATER = 64
    IV_REFILL = 256

    def __init__(
        self,
        cfg: AgentConfig,
        client,
        key_reader: KeyFileReader,
        entropy,
        clock,
        pool: PoolPolicy = PoolPolicy(),
        freshness: FreshnessPolicy = FreshnessPolicy(),
        seed: int = 0,
        report_stats: bool = True,
    ):
        self.cfg = cfg
        self.client = client
        self.client.on_message = self.on_message
        self.key_reader = key_reader
        self.entropy = entropy
        self.clock = clock
        self.stats = Stats(start_ms=clock.now_ms())
        self.keystore = KeyStore(stats=self.stats)
        self.ivstore = IVStore(stats=self.stats)
        self.signer = Signer(self.keystore, self.ivstore, clock, cfg.party, pool)
        self.verifier = Verifier(self.keystore, cfg.party, clock, freshness, stats=self.stats)
        self.report_stats = report_stats
        self.rng = random.Random(seed)
        self.peer_authenticated = False
        self.verdicts: list[tuple[int, str, Reason]] = []
        self.series: dict[str, list[tuple[int, int]]] = {"added": [], "available": [], "authenticated": []}
        self.snapshots = []
        self._seq = 0
        self._due: dict[str, int] = {}

    # lifecycle -------------------------------------------------------------

    def connect(self) -> None:
        self.client.connect()
        for topic in self.cfg.topics_sub:
            self.client.subscribe(topic, self.cfg.qos)

    def prepare(self) -> None:
        """Load the key file and fill the IV pool."""
        self.poll_keys()
        self._refill_ivs()

    def start(self) -> None:
        """Announce with an authenticated HELLO and arm the timers.

        Call :meth:`prepare` on every node first so the peer already holds
        the key the HELLO is signed with.
        """
        now = self.clock.now_ms()
        if not self.keystore.added:
            self.prepare()
        self._publish(self.cfg.topics_pub[0], HELLO + b" " + self.cfg.name.encode())
        self._due = {
            "poll": now + self.cfg.poll_offset_ms + self.cfg.key_poll_ms,
            "fast": now + self.cfg.fast_period_ms,
            "slow": now + self.cfg.slow_period_ms,
            "stats": now + self.cfg.stats_period_ms,
        }
        self._sample(now)

    def tick(self) -> None:
        now = self.clock.now_ms()
        while self._due["poll"] <= now:
            self.poll_keys()
            self._due["poll"] += self.cfg.key_poll_ms
        for schedule in ("fast", "slow"):
            period = self.cfg.fast_period_ms if schedule == "fast" else self.cfg.slow_period_ms
            while self._due[schedule] <= now:
                for topic, sched, kind in PUBLICATIONS[self.cfg.role]:
                    if sched == schedule:
                        self._publish(topic, self._body(kind))
                self._due[schedule] += period
        while self._due["stats"] <= now:
            self._sample(self._due["stats"])
            self._due["stats"] += self.cfg.stats_period_ms

    # key/iv material ----------------------------------------------------

    def poll_keys(self) -> int:
        return self.keystore.ingest(self.key_reader.read())

    def _refill_ivs(self) -> None:
        if self.ivstore.available < self.IV_LOW_WATER:
            self.ivstore.fill_from(self.entropy, self.IV_REFILL)

    # messaging ------------------------------------------------------------

    def _body(self, kind: str) -> bytes:
        self._seq += 1
        r = self.rng
        if kind == "measurement":
            fields = {
                "voltage": round(r.gauss(240.0, 1.5), 3),
                "current": round(r.gauss(12.0, 0.4), 3),
                "frequency": round(r.gauss(60.0, 0.01), 4),
                "phase": round(r.uniform(-180.0, 180.0), 2),
            }
        elif kind == "forecast":
            fields = {"horizon_s": 900, "pv_kw": round(r.uniform(0.0, 5.0), 3)}
        else:
            fields = {"setpoint_id": r.randrange(1, 9), "value": round(r.uniform(0.0, 1.0), 4)}
        doc = {"kind": kind, "seq": self._seq, "src": self.cfg.name, **fields}
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    def _publish(self, topic: str, body: bytes) -> bool:
        self._refill_ivs()
        try:
            payload = self.signer.encode(body, topic)
        except (NoKeyEver, IVExhausted) as exc:
            self.stats.record("publish_blocked")
            log.debug("%s: publish blocked: %s", self.cfg.name, exc.code)
            return False
        self.stats.record("publish_ok")
        self.client.publish(topic, payload, self.cfg.qos)
        return True

    def on_message(self, msg: Message) -> None:
        if msg.topic.startswith(StatsCollector.TOPIC_PREFIX):
            return
        verdict = self.verifier.verify_bytes(msg.payload, msg.topic)
        self.verdicts.append((self.clock.now_ms(), msg.topic, verdict.reason))
        if verdict.accepted:
            self.peer_authenticated = True
        else:
            log.warning("%s: rejected message on %s: %s", self.cfg.name, msg.topic, verdict.reason.value)

    # reporting ------------------------------------------------------------

    def _sample(self, t_abs: int) -> None:
        elapsed = t_abs - self.stats.start_ms
        self.series["added"].append((elapsed, self.keystore.added))
        self.series["available"].append((elapsed, self.keystore.partition_available(self.cfg.party)))
        self.series["authenticated"].append((elapsed, self.stats.get("publish_ok")))
        snap = self.stats.snapshot(self.cfg.name, self.clock)
        self.snapshots.append(snap)
        if self.report_stats:
            self.client.publish(StatsCollector.TOPIC_PREFIX + self.cfg.name, snap.to_json().encode(), 0)

    @property
    def failures(self) -> int:
        return self.stats.get("verify_fail")
