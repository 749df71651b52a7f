"""Acceptance suite: one check per criterion, each reporting a PASS/FAIL line.

Run under pytest (lines are repeated in the terminal summary) or directly
with ``python3 tests/test_acceptance.py``.
"""

from __future__ import annotations

import functools
import random
import sys
import time
from collections import Counter
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from harness import TOPIC, Link, single_drop_outcomes  # noqa: E402
from oracles import GMAC_256_VECTORS, crc32_bitwise, gmac_reference  # noqa: E402
from qgrid import bench  # noqa: E402
from qgrid.agents import run_scenario  # noqa: E402
from qgrid.authcodec import AuthPayload, Reason, TotalMessage, gmac_tag  # noqa: E402
from qgrid.errors import FrameError  # noqa: E402
from qgrid.keyframe import FRAME_LEN, make_frame, parse_frame, serialize_frame  # noqa: E402
from qgrid.keystore import PartyRole  # noqa: E402
from qgrid.pubsub import Network  # noqa: E402

RESULTS: list[str] = []


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


@functools.cache
def baseline_run():
    return run_scenario("baseline")


@functools.cache
def dropout_run():
    return run_scenario("dropout")


# 1 ---------------------------------------------------------------------------


def test_c01_end_to_end_round_trip():
    n = 10_000
    t0 = time.perf_counter()
    link = Link(n_keys=120, seed=1)
    net = Network()
    net.broker.start()
    verdicts: Counter = Counter()

    def on_message(msg):
        verdicts[link.verifier.verify_bytes(msg.payload, msg.topic).reason] += 1

    sub = net.client("pv", on_message).connect()
    sub.subscribe(TOPIC, 1)
    pub = net.client("intel").connect()
    next_serial = 121
    for i in range(n):
        # the key source keeps delivering two keys per message
        link.add_keys([next_serial, next_serial + 1], seed=next_serial)
        next_serial += 2
        link.refill_ivs(seed=i)
        link.clock.advance(10)
        pub.publish(TOPIC, link.signer.encode(f"reading {i}".encode(), TOPIC), 1)
    net.settle()
    elapsed = time.perf_counter() - t0
    ok_count = verdicts[Reason.OK]
    failures = sum(verdicts.values()) - ok_count
    report(
        1,
        "end-to-end round trip",
        ok_count == n and failures == 0 and elapsed < 60,
        f"{ok_count}/{n} OK, {failures} failures, {elapsed:.1f} s (limit 60 s)",
    )


# 2 ---------------------------------------------------------------------------

REGIONS = ("message", "topic", "serial", "timestamp", "iv", "mac")


def flip(data: bytes, rng: random.Random) -> bytes:
    buf = bytearray(data)
    buf[rng.randrange(len(buf))] ^= 1 << rng.randrange(8)
    return bytes(buf)


def tamper(p: AuthPayload, region: str, rng: random.Random) -> AuthPayload:
    t = p.total
    if region == "message":
        return AuthPayload(TotalMessage(flip(t.message, rng), t.topic, t.key_serial, t.timestamp), p.iv, p.mac)
    if region == "topic":
        topic = flip(t.topic.encode(), rng).decode("latin-1")
        return AuthPayload(TotalMessage(t.message, topic, t.key_serial, t.timestamp), p.iv, p.mac)
    if region == "serial":
        serial = t.key_serial ^ (1 << rng.randrange(64))
        return AuthPayload(TotalMessage(t.message, t.topic, serial, t.timestamp), p.iv, p.mac)
    if region == "timestamp":
        ts = t.timestamp ^ (1 << rng.randrange(64))
        return AuthPayload(TotalMessage(t.message, t.topic, t.key_serial, ts), p.iv, p.mac)
    if region == "iv":
        return AuthPayload(t, flip(p.iv, rng), p.mac)
    return AuthPayload(t, p.iv, flip(p.mac, rng))


def test_c02_tamper_suite():
    rng = random.Random(2)
    link = Link(n_keys=3000, seed=2)
    by_region: dict[str, Counter] = {r: Counter() for r in REGIONS}
    originals_ok = 0
    for i in range(1000):
        link.refill_ivs(seed=10_000 + i)
        link.clock.advance(10)
        msg = rng.randbytes(rng.randrange(1, 64))
        original = link.signer.create(msg, TOPIC)
        region = rng.choice(REGIONS)
        verdict = link.verifier.verify(tamper(original, region, rng), TOPIC)
        by_region[region][verdict.reason] += 1
        # the forged copy must not burn the genuine one
        originals_ok += link.verifier.verify(original, TOPIC).accepted
    accepted = sum(c[Reason.OK] for c in by_region.values())
    mac_regions = ("message", "iv", "mac")
    mac_total = sum(sum(by_region[r].values()) for r in mac_regions)
    mac_mismatch = sum(by_region[r][Reason.MAC_MISMATCH] for r in mac_regions)
    detail = (
        f"{1000 - accepted}/1000 rejected; message/iv/mac flips {mac_mismatch}/{mac_total} MAC_MISMATCH; "
        f"originals still accepted {originals_ok}/1000; "
        + ", ".join(f"{r}={dict((k.value, v) for k, v in by_region[r].items())}" for r in REGIONS)
    )
    report(2, "tamper suite", accepted == 0 and mac_mismatch == mac_total and originals_ok == 1000, detail)


# 3 ---------------------------------------------------------------------------


def test_c03_replay_suite():
    link = Link(n_keys=700, seed=3)
    accepted = []
    for i in range(1000):
        link.refill_ivs(seed=20_000 + i)
        link.clock.advance(1)
        p = link.signer.create(f"m{i}".encode(), TOPIC)
        if link.verifier.verify(p, TOPIC).accepted:
            accepted.append(p)
    reused = sum(1 for c in link.signer.history if not c.fresh)
    rng = random.Random(3)
    order = list(accepted)
    rng.shuffle(order)
    replays = Counter(link.verifier.verify(p, TOPIC).reason for p in order)

    dup_cases = [o for o in single_drop_outcomes(1) if len(o.deliveries) > 1]
    dup_ok = bool(dup_cases) and all(
        o.deliveries[1].dup and o.verdicts == [Reason.OK, Reason.KEY_REPLAYED] for o in dup_cases
    )
    ok = len(accepted) == 1000 and replays[Reason.KEY_REPLAYED] == 1000 and dup_ok
    detail = (
        f"{replays[Reason.KEY_REPLAYED]}/{len(accepted)} replays KEY_REPLAYED "
        f"({reused} of the originals signed under a reused key); "
        f"QoS 1 duplicate schedules {len(dup_cases)}, duplicates rejected as KEY_REPLAYED: {dup_ok}"
    )
    report(3, "replay suite", ok, detail)


# 4 ---------------------------------------------------------------------------


def test_c04_nonce_discipline():
    # the dropout run is where keys get reused, so it carries the weight here
    runs = (baseline_run(), dropout_run())
    pairs = [(c.serial, c.iv) for run in runs for a in run.agents.values() for c in a.signer.history]
    reused = sum(1 for run in runs for a in run.agents.values() for c in a.signer.history if not c.fresh)
    dupes = sum(n - 1 for n in Counter(pairs).values() if n > 1)
    ivs = Counter(iv for _, iv in pairs)
    report(
        4,
        "nonce discipline",
        dupes == 0 and len(pairs) > 0,
        f"{len(pairs)} (serial, IV) creations over the baseline and dropout runs "
        f"({reused} under a reused key), {dupes} duplicate pairs, "
        f"{sum(n - 1 for n in ivs.values() if n > 1)} repeated IVs",
    )


# 5 ---------------------------------------------------------------------------


def test_c05_parity_and_reserve_pool():
    threshold = 30
    lines, ok = [], True
    for name, run in (("baseline", baseline_run()), ("dropout", dropout_run())):
        fresh = {}
        for a in run.agents.values():
            fresh[a.cfg.party] = {c.serial for c in a.signer.history if c.fresh}
            parity_ok = all(a.cfg.party.owns(s) for s in fresh[a.cfg.party])
            gate_ok = all(c.unused_before > threshold for c in a.signer.history if c.fresh)
            ok &= parity_ok and gate_ok
        disjoint = not (fresh[PartyRole.ODD] & fresh[PartyRole.EVEN])
        ok &= disjoint
        lines.append(f"{name}: fresh sets disjoint={disjoint}")
    run = dropout_run()
    lo, hi = (int(x * 1000) for x in run.scenario.key_source.dropouts[0])
    hi += lo
    start = min(a.stats.start_ms for a in run.agents.values())
    window = []
    for a in run.agents.values():
        inside = [c for c in a.signer.history if lo <= c.t_ms - start < hi]
        reused = sum(1 for c in inside if not c.fresh)
        window.append(f"{a.cfg.name} reuse {reused}/{len(inside)} in window")
        ok &= reused > 0
    failures = sum(a.failures for a in run.agents.values())
    ok &= failures == 0
    lines.append(f"dropout {lo // 1000}-{hi // 1000} s: " + ", ".join(window) + f", verify failures {failures}")
    lines.append(f"fresh advances only above T={threshold}: checked")
    report(5, "parity and reserve pool", ok, "; ".join(lines))


# 6 ---------------------------------------------------------------------------


def test_c06_key_curve_shapes():
    run = baseline_run()
    intel, pv = run.agents["intel"], run.agents["pv"]
    added_same = intel.series["added"] == pv.series["added"]
    warm = 60_000
    avail = [
        (t, pv_v, in_v)
        for (t, pv_v), (_, in_v) in zip(pv.series["available"], intel.series["available"])
        if t >= warm
    ]
    below = all(pv_v < in_v for _, pv_v, in_v in avail)
    auth_pv = pv.series["authenticated"][-1][1]
    auth_in = intel.series["authenticated"][-1][1]
    ok = added_same and below and auth_pv > auth_in and run.scenario.duration_s == 600
    detail = (
        f"(a) added curves identical={added_same} ({intel.series['added'][-1][1]} keys); "
        f"(b) PV available below INTEL at all {len(avail)} samples after 60 s: {below} "
        f"(final {pv.series['available'][-1][1]} vs {intel.series['available'][-1][1]}); "
        f"(c) authenticated PV {auth_pv} > INTEL {auth_in}"
    )
    report(6, "key and message curve shapes", ok, detail)


# 7 ---------------------------------------------------------------------------


def test_c07_key_frame_format():
    rng = random.Random(7)
    lossless = 0
    for _ in range(10_000):
        f = make_frame(rng.getrandbits(64), rng.randbytes(32), rng.getrandbits(1))
        parsed, _ = parse_frame(serialize_frame(f))
        lossless += parsed == f
    sample = [make_frame(rng.getrandbits(64), rng.randbytes(32)) for _ in range(1000)]
    undetected = crc_disagree = 0
    for f in sample:
        raw = serialize_frame(f)
        crc_disagree += int.from_bytes(raw[42:], "big") != crc32_bitwise(raw[1:42])
        for bit in range(FRAME_LEN * 8):
            bad = bytearray(raw)
            bad[bit // 8] ^= 1 << (bit % 8)
            try:
                parse_frame(bytes(bad))
            except FrameError:
                continue
            undetected += 1
    check = crc32_bitwise(b"123456789")
    ok = lossless == 10_000 and undetected == 0 and crc_disagree == 0 and check == 0xCBF43926
    detail = (
        f"round trips {lossless}/10000; single-bit flips undetected {undetected}/{1000 * FRAME_LEN * 8}; "
        f"frame CRC vs oracle mismatches {crc_disagree}; oracle check value {check:#010x}"
    )
    report(7, "key-frame format", ok, detail)


# 8 ---------------------------------------------------------------------------


def test_c08_gmac_correctness():
    vectors = [tuple(bytes.fromhex(x) for x in v) for v in GMAC_256_VECTORS]
    published_ok = sum(gmac_tag(k, iv, a) == tag == gmac_reference(k, iv, a) for k, iv, a, tag in vectors)
    rng = random.Random(8)
    random_ok = total_random = 0
    for key_len in (16, 24, 32):
        for iv_len in (12, 16):
            for _ in range(20):
                k, iv = rng.randbytes(key_len), rng.randbytes(iv_len)
                data = rng.randbytes(rng.choice((0, 1, 15, 16, 17, 40, 64, 100)))
                total_random += 1
                random_ok += gmac_tag(k, iv, data) == gmac_reference(k, iv, data)
    total = len(vectors) + total_random
    ok = published_ok == len(vectors) and random_ok == total_random and total >= 100
    detail = (
        f"{published_ok}/{len(vectors)} published AAD-only 256-bit vectors, "
        f"{random_ok}/{total_random} random vectors match the reference GCM ({total} total)"
    )
    report(8, "GMAC correctness", ok, detail)


# 9 ---------------------------------------------------------------------------


def test_c09_benchmark_trends():
    t0 = time.perf_counter()
    results = bench.run(bench.BenchConfig(message_len_bytes=256, samples=512))
    elapsed = time.perf_counter() - t0
    mean = {(r.scheme, r.operation.value, r.key_bits): r.mean_ms for r in results}
    rsa_sign = [mean["RSA", "SIGN", b] for b in bench.RSA_SIZES]
    increasing = all(a < b for a, b in zip(rsa_sign, rsa_sign[1:]))
    gmac_total = mean["GMAC", "SIGN", 256] + mean["GMAC", "VERIFY", 256]
    cheap = gmac_total < mean["RSA", "SIGN", 2048] / 2
    gmac_sign = [mean["GMAC", "SIGN", b] for b in bench.GMAC_SIZES]
    flat = max(gmac_sign) <= 1.5 * min(gmac_sign)
    samples_ok = all(r.samples == 512 for r in results)
    ok = increasing and cheap and flat and samples_ok and elapsed < 600
    detail = (
        "RSA sign ms " + "/".join(f"{v:.3f}" for v in rsa_sign) + f" increasing={increasing}; "
        f"GMAC-256 sign+verify {gmac_total:.4f} ms < RSA-2048 sign/2 {mean['RSA', 'SIGN', 2048] / 2:.4f}: {cheap}; "
        "GMAC sign ms " + "/".join(f"{v:.4f}" for v in gmac_sign) + f" within 50%: {flat}; "
        f"512 samples each: {samples_ok}; {elapsed:.1f} s (limit 600 s)"
    )
    report(9, "benchmark trends", ok, detail)


# 10 --------------------------------------------------------------------------


def test_c10_qos_semantics():
    summary, ok = [], True
    for qos in (0, 1, 2):
        outcomes = single_drop_outcomes(qos)
        counts = [len(o.deliveries) for o in outcomes]
        oks = [o.verdicts.count(Reason.OK) for o in outcomes]
        extra = [v for o in outcomes for v in o.verdicts[1:]]
        if qos == 2:
            ok &= all(c == 1 for c in counts)
        elif qos == 1:
            ok &= all(c >= 1 for c in counts) and all(n == 1 for n in oks)
            ok &= all(v is Reason.KEY_REPLAYED for v in extra)
        ok &= all(o.settled for o in outcomes)
        summary.append(f"QoS {qos}: {len(outcomes)} schedules, deliveries {counts}")
    dups = sum(1 for o in single_drop_outcomes(1) if len(o.deliveries) > 1)
    summary.append(f"{dups} QoS 1 application duplicates, all KEY_REPLAYED")
    report(10, "QoS semantics under single drops", ok, "; ".join(summary))


def main() -> int:
    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_c") and callable(fn):
            try:
                fn()
            except AssertionError:
                failed += 1
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
