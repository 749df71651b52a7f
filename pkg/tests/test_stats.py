import json
import threading
import time

import pytest
from hypothesis import given, strategies as st

from qgrid.clock import ManualClock, SystemClock
from qgrid.errors import ExportError
from qgrid.stats import EVENTS, FAIL_REASONS, Stats, StatsCollector, StatsSnapshot, export, load_csv, load_jsonl


def test_event_counting():
    s = Stats()
    s.record("verify_ok")
    s.record("key_added", 5)
    s.record("verify_fail", reason="MAC_MISMATCH")
    snap = s.snapshot("n", ManualClock(0))
    assert (snap.verify_ok, snap.keys_added, snap.verify_fail) == (1, 5, 1)
    assert snap.fail_reasons == {"MAC_MISMATCH": 1}
    with pytest.raises(ValueError):
        s.record("bogus")


def test_snapshots_without_events_differ_only_in_time():
    clock = ManualClock(1000)
    s = Stats(start_ms=1000)
    s.record("key_added", 3)
    a = s.snapshot("n", clock)
    clock.advance(250)
    b = s.snapshot("n", clock)
    assert b.t_ms - a.t_ms == 250
    assert {**a.__dict__, "t_ms": 0} == {**b.__dict__, "t_ms": 0}


def test_snapshot_is_consistent_under_concurrent_recording():
    s = Stats()
    stop = threading.Event()

    def worker():
        while not stop.is_set():
            s.record("key_added")
            s.record("key_used")
            s.record("verify_fail", reason="KEY_REPLAYED")

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    try:
        for _ in range(300):
            assert s.snapshot("n", ManualClock(0)).conserved()
    finally:
        stop.set()
        for t in threads:
            t.join()


def test_periodic_collection_matches_host_timer():
    period_ms = 5000
    clock = SystemClock()
    s = Stats(start_ms=clock.now_ms())
    t0 = time.monotonic()
    snaps, host = [], []
    for k in range(1, 3):
        time.sleep(max(0.0, t0 + k * period_ms / 1000 - time.monotonic()))
        snaps.append(s.snapshot("n", clock))
        host.append(time.monotonic())
    delta = snaps[1].t_ms - snaps[0].t_ms
    host_delta = (host[1] - host[0]) * 1000
    assert abs(delta - period_ms) <= 100
    assert abs(delta - host_delta) <= 20


def sample(n):
    out = []
    for i in range(n):
        out.append(
            StatsSnapshot("pv", 5000 * i, keys_added=10 + i, keys_available=10, keys_used=i,
                          verify_fail=i, fail_reasons={"MAC_MISMATCH": i} if i else {})
        )
    return out


def test_csv_export(tmp_path):
    path = tmp_path / "s.csv"
    export(sample(3), path, "csv")
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    assert lines[0].split(",")[:2] == ["node_id", "t_ms"]
    back = load_csv(path)
    assert [b.keys_used for b in back] == [0, 1, 2]
    assert back[2].fail_reasons["MAC_MISMATCH"] == 2


def test_jsonl_round_trip(tmp_path):
    path = tmp_path / "s.jsonl"
    export(sample(4), path, "jsonl")
    assert load_jsonl(path) == sample(4)


def test_empty_export_creates_nothing(tmp_path):
    path = tmp_path / "none.csv"
    with pytest.raises(ExportError):
        export([], path)
    assert not path.exists()


def test_collector_groups_by_node():
    c = StatsCollector()
    for snap in sample(2):
        c.on_message("stats/pv", snap.to_json().encode())
    c.on_message("stats/intel", json.dumps({**sample(1)[0].__dict__, "node_id": "intel"}).encode())
    assert {k: len(v) for k, v in c.series.items()} == {"pv": 2, "intel": 1}


@given(st.lists(st.tuples(st.sampled_from(EVENTS), st.integers(1, 5), st.sampled_from(FAIL_REASONS))))
def test_fail_reasons_sum_to_failures(events):
    s = Stats()
    for ev, n, reason in events:
        s.record(ev, n, reason=reason)
    snap = s.snapshot("n", ManualClock(0))
    assert snap.verify_fail == sum(snap.fail_reasons.values())
