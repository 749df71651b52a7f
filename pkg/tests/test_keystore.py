import pytest
from hypothesis import given, strategies as st

from qgrid.errors import AlreadyConsumed, NoKeyEver, UnknownSerial
from qgrid.keyframe import KeyFrame, make_frame
from qgrid.keystore import KeyStore, PartyRole, PoolPolicy
from qgrid.stats import Stats


def frames(serials):
    return [make_frame(s, s.to_bytes(32, "big")) for s in serials]


def store_with(serials, **kw):
    ks = KeyStore(**kw)
    ks.ingest(frames(serials))
    return ks


def test_ingest_and_idempotence():
    ks = KeyStore()
    assert ks.ingest(frames([1, 2, 3])) == 3
    assert ks.ingest(frames([1, 2, 3])) == 0
    assert ks.counters() == (3, 3, 0)


def test_truncated_key_is_rejected():
    ks = KeyStore()
    assert ks.ingest([KeyFrame(1, bytes(20))]) == 0
    assert ks.rejected_length == 1
    assert ks.counters() == (0, 0, 0)


def test_used_status_is_rejected():
    ks = KeyStore()
    assert ks.ingest([make_frame(1, bytes(32), 1)]) == 0
    assert ks.rejected_status == 1


def test_first_key_is_fresh_above_threshold():
    ks = store_with(range(1, 33))
    key = ks.next_signing_key(PartyRole.ODD, PoolPolicy(30))
    assert (key.serial, key.fresh, key.unused_before) == (1, True, 32)
    assert ks.record(1).used


def test_reuse_at_threshold():
    # after taking serial 1 the table holds exactly T=30 unused keys
    ks = store_with(range(1, 32))
    assert ks.next_signing_key(PartyRole.ODD, PoolPolicy(30)).serial == 1
    assert ks.unused_count == 30
    key = ks.next_signing_key(PartyRole.ODD, PoolPolicy(30))
    assert (key.serial, key.fresh) == (1, False)


def test_even_party_picks_lowest_even():
    ks = store_with([2, 4, 5])
    key = ks.next_signing_key(PartyRole.EVEN, PoolPolicy(0))
    assert key.serial == 2
    assert ks.next_signing_key(PartyRole.EVEN, PoolPolicy(0)).serial == 4
    # the even side is drained; 5 stays untouched and 4 is reused
    again = ks.next_signing_key(PartyRole.EVEN, PoolPolicy(0))
    assert (again.serial, again.fresh) == (4, False)
    assert not ks.record(5).used


def test_cold_start_below_threshold():
    ks = store_with(range(1, 10))
    with pytest.raises(NoKeyEver):
        ks.next_signing_key(PartyRole.ODD, PoolPolicy(30))


def test_partition_reserve_holds_back_fresh_keys():
    # 40 unused overall but only 10 odd: advancing would drain the odd side
    ks = store_with(list(range(1, 21, 2)) + list(range(2, 62, 2)))
    with pytest.raises(NoKeyEver):
        ks.next_signing_key(PartyRole.ODD, PoolPolicy(30, partition_reserve=15))
    assert ks.next_signing_key(PartyRole.ODD, PoolPolicy(30, partition_reserve=5)).fresh


def test_lookup_for_verify():
    ks = store_with([1, 2, 3])
    assert ks.lookup_for_verify(2) == (2).to_bytes(32, "big")
    with pytest.raises(UnknownSerial):
        ks.lookup_for_verify(999)
    ks.mark_verified(3)
    ks.mark_verified(3)
    assert ks.counters() == (3, 2, 1)
    # still looked up while it is the counterpart's current key
    assert ks.lookup_for_verify(3, current=3)
    with pytest.raises(AlreadyConsumed):
        ks.lookup_for_verify(3, current=5)


def test_counters_arithmetic():
    ks = store_with(range(1, 11))
    ks.next_signing_key(PartyRole.ODD, PoolPolicy(0))
    ks.mark_verified(2)
    assert ks.counters() == (10, 8, 2)
    assert KeyStore().counters() == (0, 0, 0)


def test_stats_events():
    stats = Stats()
    ks = KeyStore(stats=stats)
    ks.ingest(frames(range(1, 6)) + [KeyFrame(9, b"x")])
    assert stats.get("key_added") == 5
    assert stats.get("key_rejected") == 1


def test_journal_replay(tmp_path):
    journal = tmp_path / "keys.journal"
    ks = store_with(range(1, 41), journal=journal)
    ks.next_signing_key(PartyRole.ODD, PoolPolicy(30))
    ks.mark_verified(2)
    fresh = store_with(range(1, 41))
    assert fresh.apply_journal(journal) == 2
    assert fresh.counters() == ks.counters()


ops = st.lists(
    st.one_of(
        st.tuples(st.just("ingest"), st.lists(st.integers(1, 80), max_size=10)),
        st.tuples(st.just("sign"), st.sampled_from(list(PartyRole))),
        st.tuples(st.just("verify"), st.integers(1, 80)),
    ),
    max_size=40,
)


@given(ops, st.integers(0, 10))
def test_conservation(sequence, threshold):
    ks = KeyStore()
    for op, arg in sequence:
        if op == "ingest":
            ks.ingest(frames(arg))
        elif op == "sign":
            try:
                ks.next_signing_key(arg, PoolPolicy(threshold))
            except NoKeyEver:
                pass
        elif arg in ks:
            ks.mark_verified(arg)
        added, available, used = ks.counters()
        assert added == available + used
        assert available == ks.unused_count


@given(st.lists(st.integers(1, 200), min_size=1, max_size=120, unique=True))
def test_fresh_serials_keep_parity(serials):
    ks = store_with(serials)
    odd = []
    for _ in range(len(serials)):
        try:
            k = ks.next_signing_key(PartyRole.ODD, PoolPolicy(0, 0))
        except NoKeyEver:
            break
        if k.fresh:
            odd.append(k.serial)
    assert all(s % 2 == 1 for s in odd)
    assert odd == sorted(odd)
