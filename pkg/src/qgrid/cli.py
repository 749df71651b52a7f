"""``qgrid`` command-line entry point.

Failures print a single JSON line ``{"error": <code>, "message": ...}`` on
stderr and exit 1; usage errors exit 2 before anything is touched.
Precedence for settings: flags, then ``QGRID_*`` environment variables,
then the scenario file, then built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

from qgrid.errors import QGridError

log = logging.getLogger("qgrid")

ENV_BROKER = "QGRID_BROKER_ADDR"
ENV_KEYFILE = "QGRID_KEYFILE"
ENV_DELTA = "QGRID_DELTA_MS"
ENV_SEED = "QGRID_SEED"


def _env_int(name: str) -> int | None:
    value = os.environ.get(name)
    if value in (None, ""):
        return None
    try:
        return int(value)
    except ValueError:
        raise QGridError(f"{name} must be an integer", variable=name) from None


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# keys ------------------------------------------------------------------------


def cmd_keys_inspect(args) -> int:
    from qgrid.keyframe import scan_frames

    try:
        data = Path(args.file).read_bytes()
    except OSError as exc:
        raise QGridError(str(exc), path=args.file) from exc
    for item in scan_frames(data):
        f = item.frame
        _emit({"id": f.key_id, "key_hex": f.key_data.hex(), "status": f.key_status, "crc_ok": item.crc_ok})
    return 0


def cmd_keys_status(args) -> int:
    from qgrid.keyframe import KeyFileReader
    from qgrid.keystore import KeyStore

    path = args.file or os.environ.get(ENV_KEYFILE)
    if not path:
        raise QGridError("no key file given (argument or QGRID_KEYFILE)")
    reader = KeyFileReader(path)
    store = KeyStore()
    store.ingest(reader.read())
    if args.journal:
        store.apply_journal(args.journal)
    c = store.counters()
    _emit(
        {
            "added": c.added,
            "available": c.available,
            "used": c.used,
            "rejected": store.rejected,
            "bad_crc": reader.bad_crc,
        }
    )
    return 0


def cmd_keys_generate(args) -> int:
    from qgrid.agents.keysource import KeySourceConfig, run_key_source

    cfg = KeySourceConfig(
        mean_keys_per_sec=args.rate,
        jitter_model=args.model,
        duration_s=args.duration,
        sigma=args.sigma,
        dropouts=[tuple(map(float, d.split(":"))) for d in args.dropout],
        warmup_keys=args.warmup,
        seed=args.seed if args.seed is not None else (_env_int(ENV_SEED) or 0),
    )
    for out in args.out:
        Path(out).unlink(missing_ok=True)
    try:
        n = run_key_source(cfg, args.out)
    except Exception:
        for out in args.out:
            Path(out).unlink(missing_ok=True)
        raise
    _emit({"frames": n, "files": args.out})
    return 0


# iv --------------------------------------------------------------------------


def cmd_iv_status(args) -> int:
    from qgrid.ivstore import IVStore

    store = IVStore()
    if args.entropy:
        try:
            store.chunk(Path(args.entropy).read_bytes())
        except OSError as exc:
            raise QGridError(str(exc), path=args.entropy) from exc
    c = store.counters()
    _emit({"added": c.added, "available": c.available, "used": c.used})
    return 0


# broker / agent --------------------------------------------------------------


def _addr(args) -> tuple[str, int]:
    from qgrid.pubsub.sockets import parse_addr

    return parse_addr(args.broker or os.environ.get(ENV_BROKER) or "127.0.0.1:1883")


def cmd_broker(args) -> int:
    from qgrid.pubsub.sockets import BrokerServer

    host, port = _addr(args)
    try:
        server = BrokerServer(host, port).start()
    except OSError as exc:
        raise QGridError(str(exc), addr=f"{host}:{port}") from exc
    print(f"broker listening on {server.host}:{server.port}", file=sys.stderr, flush=True)
    try:
        deadline = time.monotonic() + args.duration if args.duration else None
        while deadline is None or time.monotonic() < deadline:
            time.sleep(0.2)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def cmd_agent(args) -> int:
    from qgrid.agents.agent import Agent, AgentConfig
    from qgrid.authcodec import FreshnessPolicy
    from qgrid.clock import SystemClock
    from qgrid.ivstore import StreamRandomSource, SystemRandomSource
    from qgrid.keyframe import KeyFileReader
    from qgrid.keystore import PoolPolicy
    from qgrid.pubsub.sockets import socket_client
    from qgrid.stats import export

    host, port = _addr(args)
    keyfile = args.keyfile or os.environ.get(ENV_KEYFILE) or f"{args.role.lower()}.keys"
    delta = args.delta_ms or _env_int(ENV_DELTA) or 2000
    cfg = AgentConfig(
        role=args.role,
        name=args.name or args.role.lower(),
        fast_period_ms=args.fast_ms,
        slow_period_ms=args.slow_ms,
        stats_period_ms=args.stats_ms,
        qos=args.qos,
    )
    entropy = StreamRandomSource(args.entropy) if args.entropy else SystemRandomSource()
    clock = SystemClock()
    agent = Agent(
        cfg,
        socket_client(cfg.name, host, port),
        KeyFileReader(keyfile),
        entropy,
        clock,
        PoolPolicy(args.threshold),
        FreshnessPolicy(delta),
    )
    agent.connect()
    agent.prepare()
    agent.start()
    deadline = time.monotonic() + args.duration if args.duration else None
    next_retry = time.monotonic() + 2.0
    try:
        while deadline is None or time.monotonic() < deadline:
            agent.tick()
            if time.monotonic() >= next_retry:
                agent.client.retry(only_aged=True)
                next_retry += 2.0
            if not agent.client.connected:
                raise QGridError("connection to broker lost")
            time.sleep(0.05)
    except KeyboardInterrupt:
        pass
    finally:
        agent.client.disconnect()
    if args.stats_out and agent.snapshots:
        export(agent.snapshots, args.stats_out, "jsonl")
    _emit(
        {
            "agent": cfg.name,
            "authenticated": agent.stats.get("publish_ok"),
            "verify_ok": agent.stats.get("verify_ok"),
            "verify_fail": agent.stats.get("verify_fail"),
        }
    )
    return 0


# scenario / stats / bench -----------------------------------------------------


def cmd_scenario_run(args) -> int:
    from qgrid.agents.scenario import load_scenario, run_scenario

    seed = args.seed if args.seed is not None else _env_int(ENV_SEED)
    sc = load_scenario(args.scenario, seed)
    delta = _env_int(ENV_DELTA)
    if args.delta_ms is not None:
        delta = args.delta_ms
    if delta is not None:
        sc.delta_ms = delta
    out = Path(args.out)
    existed = out.exists()
    try:
        run = run_scenario(sc, out, key_dir=args.key_dir)
    except Exception:
        if not existed and out.exists():
            shutil.rmtree(out, ignore_errors=True)
        raise
    _emit({"out": str(out), "files": [p.name for p in run.files], **run.summary()})
    return 0


def cmd_stats_export(args) -> int:
    from qgrid.stats import export, load_jsonl

    try:
        series = load_jsonl(args.input)
    except OSError as exc:
        raise QGridError(str(exc), path=args.input) from exc
    export(series, args.out, args.format)
    _emit({"rows": len(series), "out": args.out})
    return 0


def cmd_bench_run(args) -> int:
    from qgrid import bench

    sizes = list(args.rsa) + ([8192] if args.rsa_extended else [])
    cfg = bench.BenchConfig(args.message_len, args.samples, args.gmac, sizes)
    results = bench.run(cfg)
    fmt = "json" if str(args.out).endswith(".json") else "csv"
    # write next to the target first so a failure leaves nothing behind
    target = Path(args.out)
    fd, tmp = tempfile.mkstemp(dir=target.parent if str(target.parent) else ".", suffix=".partial")
    os.close(fd)
    try:
        bench.bench_report(results, tmp, fmt)
        os.replace(tmp, target)
        if args.chart:
            bench.write_chart_series(results, args.chart)
    finally:
        Path(tmp).unlink(missing_ok=True)
    for r in results:
        ref = bench.REFERENCE_MS.get((r.scheme, r.key_bits))
        note = ""
        if ref:
            note = f"  (reference {ref[0 if r.operation.value == 'SIGN' else 1]:.4f})"
        print(
            f"{r.scheme}-{r.key_bits:<5} {r.operation.value:<6} {r.mean_ms:10.4f} ± {r.stderr_ms:.4f} ms{note}",
            file=sys.stderr,
        )
    return 0


# parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qgrid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    verbs = p.add_subparsers(dest="verb", required=True, metavar="{keys,iv,broker,agent,scenario,stats,bench}")

    keys = verbs.add_parser("keys", help="inspect, summarize or generate key files")
    ka = keys.add_subparsers(dest="action", required=True)
    k = ka.add_parser("inspect", help="print frames as JSON lines")
    k.add_argument("file")
    k.set_defaults(func=cmd_keys_inspect)
    k = ka.add_parser("status", help="ingest a key file and print counters")
    k.add_argument("file", nargs="?")
    k.add_argument("--journal", help="replay USE events from a key journal")
    k.set_defaults(func=cmd_keys_status)
    k = ka.add_parser("generate", help="write simulated key files for a live demo")
    k.add_argument("--out", action="append", required=True, help="key file to write (repeat per node)")
    k.add_argument("--rate", type=float, default=2.0)
    k.add_argument("--model", choices=["CONSTANT", "GAUSSIAN", "DROPOUT"], default="CONSTANT")
    k.add_argument("--sigma", type=float, default=0.2)
    k.add_argument("--dropout", action="append", default=[], metavar="START:LEN")
    k.add_argument("--duration", type=float, default=600.0)
    k.add_argument("--warmup", type=int, default=950)
    k.add_argument("--seed", type=int)
    k.set_defaults(func=cmd_keys_generate)

    iv = verbs.add_parser("iv", help="IV pool utilities")
    ia = iv.add_subparsers(dest="action", required=True)
    i = ia.add_parser("status", help="chunk an entropy file and print counters")
    i.add_argument("--entropy", help="raw random bytes")
    i.set_defaults(func=cmd_iv_status)

    b = verbs.add_parser("broker", help="run the TCP broker")
    b.add_argument("--broker", help="listen address host:port (default 127.0.0.1:1883)")
    b.add_argument("--duration", type=float, default=0.0, help="seconds to run; 0 runs until interrupted")
    b.set_defaults(func=cmd_broker)

    a = verbs.add_parser("agent", help="run one agent against a TCP broker")
    a.add_argument("--role", choices=["INTEL", "PV"], required=True)
    a.add_argument("--name")
    a.add_argument("--broker", help="broker address host:port")
    a.add_argument("--keyfile")
    a.add_argument("--entropy", help="captured random bytes for IVs (default: OS CSPRNG)")
    a.add_argument("--duration", type=float, default=60.0)
    a.add_argument("--delta-ms", type=int)
    a.add_argument("--threshold", type=int, default=30)
    a.add_argument("--fast-ms", type=int, default=1000)
    a.add_argument("--slow-ms", type=int, default=5000)
    a.add_argument("--stats-ms", type=int, default=5000)
    a.add_argument("--qos", type=int, choices=[0, 1, 2], default=1)
    a.add_argument("--stats-out", help="write snapshots as JSON lines")
    a.set_defaults(func=cmd_agent)

    s = verbs.add_parser("scenario", help="simulated end-to-end runs")
    sa = s.add_subparsers(dest="action", required=True)
    r = sa.add_parser("run", help="run a scenario file or a bundled scenario name")
    r.add_argument("scenario")
    r.add_argument("--seed", type=int)
    r.add_argument("--delta-ms", type=int)
    r.add_argument("--out", default="run-out")
    r.add_argument("--key-dir", help="write the key files here instead of keeping them in memory")
    r.set_defaults(func=cmd_scenario_run)

    st = verbs.add_parser("stats", help="statistics export")
    sta = st.add_subparsers(dest="action", required=True)
    e = sta.add_parser("export", help="convert JSON-lines snapshots")
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_stats_export)

    be = verbs.add_parser("bench", help="GMAC vs RSA latency")
    bea = be.add_subparsers(dest="action", required=True)
    br = bea.add_parser("run")
    br.add_argument("--message-len", type=int, default=256)
    br.add_argument("--samples", type=int, default=512)
    br.add_argument("--gmac", type=_csv_ints, default=[128, 192, 256])
    br.add_argument("--rsa", type=_csv_ints, default=[1024, 2048, 3072, 4096])
    br.add_argument("--rsa-extended", action="store_true", help="add RSA-8192")
    br.add_argument("--out", default="results.csv")
    br.add_argument("--chart", help="also write gnuplot-ready series")
    br.set_defaults(func=cmd_bench_run)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except QGridError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
