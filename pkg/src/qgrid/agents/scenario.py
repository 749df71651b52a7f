"""Single-process discrete-time scenario runner.

A scenario file is JSON::

    {
      "seed": 42,
      "duration_s": 600,
      "step_ms": 100,
      "broker": {"qos": 1},
      "pool": {"threshold": 30},
      "freshness": {"delta_ms": 2000},
      "key_source": {"mean_keys_per_sec": 2.0, "jitter_model": "GAUSSIAN",
                     "sigma": 0.2, "dropouts": [[300, 30]], "warmup_keys": 950},
      "agents": [{"role": "INTEL", "party": "ODD", ...}, {"role": "PV", ...}],
      "attacks": {"replay_every": 0, "tamper_every": 0}
    }

Everything runs on a shared manual clock, so a seeded scenario is
reproducible byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import os
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from qgrid.agents.agent import Agent, AgentConfig, AgentRole
from qgrid.agents.keysource import KeySource, KeySourceConfig
from qgrid.authcodec import AuthPayload, FreshnessPolicy, decode_payload, encode_payload
from qgrid.clock import ManualClock, SkewedClock
from qgrid.errors import ConfigError
from qgrid.ivstore import SeededRandomSource
from qgrid.keyframe import KeyFileReader
from qgrid.keystore import PoolPolicy
from qgrid.pubsub import FaultInjector, Message, Network
from qgrid.stats import StatsCollector, export

SERIES = ("added", "available", "authenticated")
START_MS = 1_700_000_000_000


@dataclass
class Scenario:
    seed: int = 0
    duration_s: float = 600.0
    step_ms: int = 100
    qos: int = 1
    threshold: int = 30
    delta_ms: int = 2000
    key_source: KeySourceConfig = field(default_factory=KeySourceConfig)
    agents: list[AgentConfig] = field(default_factory=list)
    replay_every: int = 0
    tamper_every: int = 0
    drop_rate: float = 0.0

    @classmethod
    def from_dict(cls, doc: dict, seed: int | None = None) -> "Scenario":
        known = {"seed", "duration_s", "step_ms", "broker", "pool", "freshness", "key_source", "agents", "attacks", "faults"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}", field=sorted(unknown)[0])
        seed = int(doc.get("seed", 0)) if seed is None else seed
        duration = float(doc.get("duration_s", 600))
        if duration <= 0:
            raise ConfigError("duration_s must be positive", field="duration_s")
        step = int(doc.get("step_ms", 100))
        if step <= 0:
            raise ConfigError("step_ms must be positive", field="step_ms")
        broker = doc.get("broker", {})
        ks_doc = dict(doc.get("key_source", {}))
        ks_doc.setdefault("duration_s", duration)
        ks_doc.setdefault("warmup_keys", 950)
        ks_doc["seed"] = seed
        try:
            ks = KeySourceConfig(**ks_doc)
        except TypeError as exc:
            raise ConfigError(str(exc), field="key_source") from exc
        except ValueError as exc:
            raise ConfigError(str(exc), field="key_source.jitter_model") from exc
        agents = []
        for i, a in enumerate(doc.get("agents", [])):
            a = dict(a)
            a.setdefault("qos", broker.get("qos", 1))
            try:
                agents.append(AgentConfig(**a))
            except ConfigError as exc:
                raise ConfigError(str(exc), field=f"agents[{i}].{exc.context.get('field', '')}") from exc
            except (TypeError, ValueError, KeyError) as exc:
                raise ConfigError(f"bad agent config: {exc}", field=f"agents[{i}]") from exc
        if len(agents) != 2:
            raise ConfigError("exactly two agents are required", field="agents")
        if {a.party for a in agents} != {agents[0].party, agents[0].party.other}:
            raise ConfigError("agents must hold opposite key parities", field="agents[1].party")
        if len({a.name for a in agents}) != 2:
            raise ConfigError("agent names must be distinct", field="agents[1].name")
        attacks = doc.get("attacks", {})
        faults = doc.get("faults", {})
        return cls(
            seed=seed,
            duration_s=duration,
            step_ms=step,
            qos=int(broker.get("qos", 1)),
            threshold=int(doc.get("pool", {}).get("threshold", 30)),
            delta_ms=int(doc.get("freshness", {}).get("delta_ms", 2000)),
            key_source=ks,
            agents=agents,
            replay_every=int(attacks.get("replay_every", 0)),
            tamper_every=int(attacks.get("tamper_every", 0)),
            drop_rate=float(faults.get("drop_rate", 0.0)),
        )


def load_scenario(source: str | os.PathLike | dict, seed: int | None = None) -> Scenario:
    """Load from a dict, a path, or the name of a bundled scenario."""
    if isinstance(source, dict):
        return Scenario.from_dict(source, seed)
    path = Path(source)
    if not path.exists():
        bundled = resources.files("qgrid.scenarios") / (path.stem + ".scenario")
        if not bundled.is_file():
            raise ConfigError(f"scenario not found: {source}", field="scenario")
        text = bundled.read_text(encoding="utf-8")
    else:
        text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", field="scenario") from exc
    return Scenario.from_dict(doc, seed)


class Attacker:
    """Eavesdrops on the broker and re-injects captured payloads."""

    def __init__(self, network: Network, topics, replay_every: int, tamper_every: int, seed: int):
        self.replay_every = replay_every
        self.tamper_every = tamper_every
        self.rng = random.Random(seed)
        self.seen = 0
        self.injected = {"replay": 0, "tamper": 0}
        self.client = network.client("mallory", self.on_message)
        self.client.connect()
        for t in topics:
            self.client.subscribe(t, 0)

    def on_message(self, msg: Message) -> None:
        self.seen += 1
        if self.replay_every and self.seen % self.replay_every == 0:
            self.injected["replay"] += 1
            self.client.publish(msg.topic, msg.payload, 0)
        if self.tamper_every and self.seen % self.tamper_every == 0:
            p = decode_payload(msg.payload)
            mac = bytearray(p.mac)
            mac[self.rng.randrange(16)] ^= 1 << self.rng.randrange(8)
            self.injected["tamper"] += 1
            self.client.publish(msg.topic, encode_payload(AuthPayload(p.total, p.iv, bytes(mac))), 0)


@dataclass
class RunArtifacts:
    scenario: Scenario
    agents: dict[str, Agent]
    key_source: KeySource
    collector: StatsCollector
    network: Network
    attacker: Attacker | None = None
    files: list[Path] = field(default_factory=list)

    def summary(self) -> dict:
        out = {"seed": self.scenario.seed, "keys_emitted": self.key_source.emitted, "agents": {}}
        for name, a in self.agents.items():
            hist = a.signer.history
            out["agents"][name] = {
                "party": a.cfg.party.name,
                "authenticated": a.stats.get("publish_ok"),
                "blocked": a.stats.get("publish_blocked"),
                "verify_ok": a.stats.get("verify_ok"),
                "verify_fail": a.stats.get("verify_fail"),
                "fail_reasons": a.snapshots[-1].fail_reasons if a.snapshots else {},
                "fresh_keys": sum(1 for c in hist if c.fresh),
                "reused_keys": sum(1 for c in hist if not c.fresh),
                "keys_added": a.keystore.added,
                "keys_available": a.keystore.counters().available,
                "peer_authenticated": a.peer_authenticated,
            }
        if self.attacker is not None:
            out["injected"] = dict(self.attacker.injected)
        return out


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("elapsed_ms", "value"))
    w.writerows(rows)
    return buf.getvalue()


def run_scenario(
    source: str | os.PathLike | dict | Scenario,
    out_dir: str | os.PathLike | None = None,
    seed: int | None = None,
    key_dir: str | os.PathLike | None = None,
) -> RunArtifacts:
    """Run broker, key source, both agents and the stats collector.

    With ``out_dir`` set, writes ``<agent>_{added,available,authenticated}.csv``,
    ``stats.csv`` and ``summary.json``. Key files go to ``key_dir`` when given,
    otherwise they stay in memory.
    """
    sc = source if isinstance(source, Scenario) else load_scenario(source, seed)
    clock = ManualClock(START_MS)
    faults = FaultInjector()
    if sc.drop_rate > 0:
        drop_rng = random.Random(sc.seed ^ 0xD50)
        faults.drop_if = lambda tx: tx.packet.type.name != "CONNACK" and drop_rng.random() < sc.drop_rate
    network = Network(faults=faults)
    network.broker.start()

    if key_dir is not None:
        Path(key_dir).mkdir(parents=True, exist_ok=True)
        sinks = [Path(key_dir) / f"{a.name}.keys" for a in sc.agents]
        for s in sinks:
            s.unlink(missing_ok=True)
    else:
        sinks = [io.BytesIO() for _ in sc.agents]
    key_source = KeySource(sc.key_source, sinks)

    collector = StatsCollector()
    stats_client = network.client("stats-collector", lambda m: collector.on_message(m.topic, m.payload))
    stats_client.connect()
    collector.attach(stats_client, [a.name for a in sc.agents])

    pool = PoolPolicy(sc.threshold)
    freshness = FreshnessPolicy(sc.delta_ms)
    agents: dict[str, Agent] = {}
    for i, (cfg, sink) in enumerate(zip(sc.agents, sinks)):
        agent_clock = SkewedClock(clock, cfg.skew_ms) if cfg.skew_ms else clock
        agents[cfg.name] = Agent(
            cfg,
            network.client(cfg.name),
            KeyFileReader(sink),
            SeededRandomSource(sc.seed * 1000 + 17 * (i + 1)),
            agent_clock,
            pool,
            freshness,
            seed=sc.seed * 1000 + i,
        )
    for a in agents.values():
        a.connect()

    attacker = None
    if sc.replay_every or sc.tamper_every:
        topics = sorted({t for a in sc.agents for t in a.topics_pub})
        attacker = Attacker(network, topics, sc.replay_every, sc.tamper_every, sc.seed)

    for a in agents.values():
        a.prepare()
    for a in agents.values():
        a.start()

    end = int(sc.duration_s * 1000)
    for t in range(sc.step_ms, end + 1, sc.step_ms):
        clock.set(START_MS + t)
        key_source.advance_to(t)
        for a in agents.values():
            a.tick()
        if network.pending():
            network.settle()
    if key_dir is not None:
        key_source.close()

    run = RunArtifacts(sc, agents, key_source, collector, network, attacker)
    if out_dir is not None:
        run.files = write_outputs(run, out_dir)
    return run


def write_outputs(run: RunArtifacts, out_dir: str | os.PathLike) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    try:
        for name, agent in run.agents.items():
            for series in SERIES:
                path = out / f"{name}_{series}.csv"
                path.write_text(_csv_text(agent.series[series]), encoding="utf-8")
                written.append(path)
        snaps = [s for node in sorted(run.collector.series) for s in run.collector.series[node]]
        if snaps:
            export(snaps, out / "stats.csv", "csv")
            written.append(out / "stats.csv")
        path = out / "summary.json"
        path.write_text(json.dumps(run.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)
    except Exception:
        for p in written:
            p.unlink(missing_ok=True)
        raise
    return written


__all__ = ["AgentRole", "RunArtifacts", "Scenario", "load_scenario", "run_scenario", "write_outputs"]
