import math

import pytest
from conftest import cached_keys
from hypothesis import given, settings
from hypothesis import strategies as st

from posattest import crypto, wire
from posattest.crypto import KeyRole
from posattest.verifier import (
    CSV_HEADER,
    RejectReason,
    Verdict,
    filter_feed,
    report_csv,
    verify_token,
)
from posattest.wire import CanonicalAttestationMessage

DAY = 86400


def make(handle="alice", ts=1000, label="g1", platform="twitter", key=None):
    key = key or cached_keys(KeyRole.POS_GROUP, 11)
    msg = CanonicalAttestationMessage(platform, handle, label, ts)
    return wire.format_token(msg, crypto.sign(key.secret, wire.canonical_bytes(msg)))


@pytest.fixture
def pub():
    return cached_keys(KeyRole.POS_GROUP, 11).public


def test_accept(pub):
    result = verify_token(make(), pub, 2000)
    assert result.status is Verdict.ACCEPT and result.message.handle == "alice"


def test_flipped_hex_digit(pub):
    token = make()
    last = token[-1]
    bad = token[:-1] + ("0" if last != "0" else "1")
    assert verify_token(bad, pub, 2000).reason is RejectReason.BAD_SIGNATURE


def test_future(pub):
    assert verify_token(make(ts=5000), pub, 2000).reason is RejectReason.FUTURE_TIMESTAMP


def test_malformed(pub):
    assert verify_token("nonsense", pub, 0).reason is RejectReason.MALFORMED


def test_other_group_key(pub):
    other = cached_keys(KeyRole.POS_GROUP, 12)
    assert verify_token(make(key=other), pub, 2000).reason is RejectReason.BAD_SIGNATURE
    assert verify_token(make(key=other, label="g2"), {"g1": pub, "g2": other.public}, 2000).accepted
    assert verify_token(make(label="g9"), {"g1": pub}, 2000).reason is RejectReason.BAD_SIGNATURE


def test_filter_age(pub):
    old = make(handle="old", ts=0)
    new = make(handle="new", ts=9 * DAY)
    now = 10 * DAY
    assert [e.message.handle for e in filter_feed([old, new], pub, now, 7 * DAY)] == ["new"]
    assert [e.message.handle for e in filter_feed([old, new], pub, now, math.inf)] == ["old", "new"]


def test_filter_drops_invalid(pub):
    tokens = [make(handle="a"), "junk", make(handle="b")[:-2] + "00"]
    assert [e.message.handle for e in filter_feed(tokens, pub, 10**6)] == ["a"]


def test_filter_rejects_bad_max_age(pub):
    with pytest.raises(ValueError):
        filter_feed([], pub, 0, 0)


def test_reverified_account_shows_newest_only(pub):
    tokens = [make(ts=100), make(handle="bob", ts=150), make(ts=300)]
    feed = filter_feed(tokens, pub, 1000)
    assert [(e.message.handle, e.message.timestamp) for e in feed] == [("bob", 150), ("alice", 300)]


@given(st.lists(st.tuples(st.sampled_from(["a", "b", "c"]), st.integers(0, 100), st.booleans()), max_size=8),
       st.integers(1, 100), st.integers(1, 100))
@settings(max_examples=200, deadline=None)
def test_feed_subset_and_monotone(items, age1, age2):
    pub = cached_keys(KeyRole.POS_GROUP, 11).public
    tokens = [make(handle=h, ts=ts) if ok else "ghost1.bad.00" for h, ts, ok in items]
    lo, hi = sorted((age1, age2))
    small = filter_feed(tokens, pub, 100, lo)
    big = filter_feed(tokens, pub, 100, hi)
    accepted = {t for t in tokens if verify_token(t, pub, 100).accepted}
    assert {e.token for e in big} <= accepted
    assert {e.token for e in small} <= {e.token for e in big}


def test_report_csv(pub):
    text = report_csv([make(ts=100), "junk", "", make(ts=10)], pub, 200, max_age_seconds=150)
    lines = text.strip().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1] == "accept,,twitter,alice,g1,100"
    assert lines[2] == "reject,Malformed,,,,"
    assert lines[3] == "stale,TooOld,twitter,alice,g1,190"
