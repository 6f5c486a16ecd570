import copy
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from posattest.simnet import checks
from posattest.simnet.engine import (
    DAY,
    HOUR,
    Channels,
    ChannelUnavailable,
    EventLoop,
    RunLedger,
    rng_stream,
)
from posattest.simnet.scenario import (
    ConfigError,
    build_world,
    bundled_scenario_path,
    bundled_scenarios,
    load_scenario,
    run_scenario,
    run_world,
    validate,
)
from posattest.simnet.world import HONEST

DATA = Path(__file__).parent / "data"

SMALL = {
    "duration_days": 5,
    "platforms": ["twitter"],
    "stores": [{"id": "s1", "group": "g1"}, {"id": "s2", "group": "g2"}],
    "users": {"count": 6},
}


# engine --------------------------------------------------------------------

def test_loop_orders_by_time_then_insertion():
    loop = EventLoop()
    seen = []
    loop.call_at(5, seen.append, "b")
    loop.call_at(1, seen.append, "a")
    loop.call_at(5, seen.append, "c")
    loop.run()
    assert seen == ["a", "b", "c"] and loop.now == 5


def test_processes_interleave():
    loop = EventLoop()
    seen = []

    def proc(name, gaps):
        for g in gaps:
            yield g
            seen.append((loop.now, name))

    loop.spawn(proc("x", [2, 2]))
    loop.spawn(proc("y", [3]))
    loop.run()
    assert seen == [(2, "x"), (3, "y"), (4, "x")]


def test_bad_yield_rejected():
    loop = EventLoop()

    def proc():
        yield -1

    loop.spawn(proc())
    with pytest.raises(TypeError):
        loop.run()


def test_run_until_leaves_later_events():
    loop = EventLoop()
    loop.call_at(10, lambda: None)
    loop.run(until=5)
    assert loop.pending() == 1


def test_cannot_schedule_in_past():
    loop = EventLoop()
    loop.call_at(3, lambda: None)
    loop.run()
    with pytest.raises(ValueError):
        loop.call_at(1, lambda: None)


def test_rng_streams_independent_of_other_labels():
    a = rng_stream(1, "alice").random()
    rng_stream(1, "bob").random()
    assert rng_stream(1, "alice").random() == a
    assert rng_stream(2, "alice").random() != a


def test_ledger_monotone_and_roundtrip():
    ledger = RunLedger()
    ledger.append(1, "x", "k", {"a": 1})
    with pytest.raises(ValueError):
        ledger.append(0, "x", "k")
    back = RunLedger.from_ndjson(ledger.to_ndjson().splitlines())
    assert back.to_ndjson() == ledger.to_ndjson()
    assert len(ledger.events[0].digest) == 32


def _channels(positions):
    loop = EventLoop()
    ledger = RunLedger()
    return loop, ledger, Channels(loop, ledger, positions.__getitem__, net_latency=2)


def test_nfc_needs_same_node():
    loop, ledger, ch = _channels({"a": "n1", "b": "n1", "c": "n2"})
    ch.nfc("a", "b", b"x", "hello")
    with pytest.raises(ChannelUnavailable):
        ch.nfc("a", "c", b"x", "hello")
    assert [e.kind for e in ledger.events] == ["nfc", "nfc_unavailable"]


def test_net_latency():
    _, ledger, ch = _channels({})
    assert ch.net("a", "b", b"x", "m") == 2


@pytest.mark.parametrize("delay,redirect", [(24 * HOUR, None), (96 * HOUR, "abroad")])
def test_mail_arrives_after_delay(delay, redirect):
    loop, ledger, ch = _channels({})
    got = []
    arrival = ch.mail_deliver("qr", delay, "home:a", redirect, on_arrival=lambda item, dest: got.append(
        (loop.now, item, dest)))
    loop.run()
    assert arrival == delay
    assert got == [(delay, "qr", redirect or "home:a")]


# config --------------------------------------------------------------------

def test_defaults_filled():
    cfg = validate(SMALL)
    assert cfg["timing"]["qr_validity_s"] == 72 * HOUR
    assert cfg["timing"]["mail_delay_s"] == [DAY, 2 * DAY]
    assert cfg["caps"]["default_address_cap"] == 4
    assert cfg["key_bits"] == 512


@pytest.mark.parametrize("patch,path", [
    ({"platforms": []}, "platforms"),
    ({"stores": [{"id": "s1"}]}, "stores/0"),
    ({"users": {"count": -1}}, "users/count"),
    ({"timing": {"mail_delay_s": [5, 1]}}, "timing/mail_delay_s"),
    ({"timing": {"bogus": 1}}, "timing"),
    ({"attacks": [{"kind": "sybil", "id": "x", "technique": "address", "operatives": 2, "in_country": 3}]},
     "attacks/0/in_country"),
    ({"attacks": [{"kind": "sybil", "id": "x", "technique": "magic", "operatives": 2}]}, "attacks/0/technique"),
    ({"attacks": [{"kind": "pos_relocation", "id": "x", "store": "nope", "at_s": 1}]}, "attacks/0/store"),
    ({"users": {"count": 1, "stores": ["zz"]}}, "users/stores/0"),
])
def test_config_errors_carry_path(patch, path):
    doc = copy.deepcopy(SMALL)
    doc.update(patch)
    with pytest.raises(ConfigError) as info:
        validate(doc)
    assert info.value.path == path


def test_census_csv_relative_to_scenario(tmp_path):
    (tmp_path / "census.csv").write_text("address,cap\naddr-00000,1\n")
    doc = dict(SMALL, caps={"census_csv": "census.csv"}, users={"count": 2, "per_address": 2})
    (tmp_path / "s.json").write_text(__import__("json").dumps(doc))
    cfg = load_scenario(tmp_path / "s.json")
    assert cfg["caps"]["census"] == {"addr-00000": 1}
    _, metrics = run_scenario(cfg, 0)
    assert metrics["tokens_issued"] == 1
    assert metrics["refusals_by_reason"] == {"RefusedAddressCap": 1}


def test_invalid_json(tmp_path):
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "bad.json")


# runs ----------------------------------------------------------------------

def test_same_seed_same_ledger():
    cfg = validate(SMALL)
    a, _ = run_scenario(cfg, 3)
    b, _ = run_scenario(cfg, 3)
    c, _ = run_scenario(cfg, 4)
    assert a.to_ndjson() == b.to_ndjson()
    assert a.digest() != c.digest()


def test_small_honest_run_is_clean():
    world, metrics = run_world(validate(SMALL), 0)
    assert metrics["tokens_issued"] == 6 and metrics["refusals_total"] == 0
    assert checks.audit(world) == []
    assert {t.owner for t in world.tokens} == {HONEST}


def test_ledger_invariants_on_bundled_scenarios():
    for name in bundled_scenarios():
        world, _ = run_world(load_scenario(bundled_scenario_path(name)), 0)
        events = world.ledger.events
        assert all(a.t <= b.t for a, b in zip(events, events[1:]))
        assert all(e.data["src_node"] == e.data["dst_node"] for e in world.ledger.of_kind("nfc"))
        assert checks.audit(world) == [], name


def test_every_token_has_full_session():
    world, _ = run_world(validate(SMALL), 1)
    states = {}
    for e in world.ledger.of_kind("session"):
        states.setdefault(e.data["session"], []).append(e.data["state"])
    for tok in world.tokens:
        assert states[tok.session][:5] == ["AwaitQr", "QrOk", "ChallengeIssued", "SentienceOk", "UniquenessOk"]


def test_skip_sentience_fixture_fails_audit():
    world, _ = run_world(load_scenario(DATA / "skip_sentience.json"), 0)
    problems = checks.audit(world)
    assert problems and all("SentienceOk" in p for p in problems)


def test_abroad_person_cannot_reach_terminal():
    cfg = validate(dict(SMALL, users={"count": 0}))
    world, _ = build_world(cfg, 0)
    p = world.add_person("x:abroad", "operative", "far", in_country=False)
    p.app.login("twitter", "h")
    world.spawn(world.address_round(p, "s1", [("twitter", "h")]))
    world.run()
    assert world.tokens == []
    assert [r.reason for r in world.refusals] == ["ChannelUnavailable"]


@pytest.mark.parametrize("extra,reason", [(0, None), (3 * DAY, "Expired")])
def test_redirect_delay_vs_window(extra, reason):
    cfg = validate(dict(SMALL, users={"count": 0}, timing={"mail_delay_s": [DAY, DAY]}))
    world, _ = build_world(cfg, 0)
    p = world.add_person("x:1", "attacker", "a1")
    p.app.login("twitter", "h")
    world.spawn(world.address_round(p, "s1", [("twitter", "h")], redirect=lambda: (p.home, extra, p)))
    world.run()
    assert [r.reason for r in world.refusals] == ([reason] if reason else [])
    assert len(world.tokens) == (0 if reason else 1)


def test_redirect_to_other_device():
    cfg = validate(dict(SMALL, users={"count": 0}))
    world, _ = build_world(cfg, 0)
    p = world.add_person("x:1", "attacker", "a1")
    q = world.add_person("x:2", "attacker", "a2")
    world.spawn(world.address_round(p, "s1", [("twitter", "h")], redirect=lambda: (q.home, 0, q)))
    world.run()
    assert [r.reason for r in world.refusals] == ["WrongDevice"]


def test_typos_restart_challenge():
    cfg = validate(dict(SMALL, users={"count": 20, "typo_rate": 0.5}))
    world, metrics = run_world(cfg, 0)
    restarts = [e for e in world.ledger.of_kind("session")
                if e.data["state"] == "ChallengeIssued" and e.data["restarts"] > 0]
    assert restarts
    assert metrics["tokens_issued"] + metrics["refusals_by_reason"].get("TooManyRestarts", 0) == 20


def test_rooted_users_refused():
    world, metrics = run_world(validate(dict(SMALL, users={"count": 10, "rooted_fraction": 1.0})), 0)
    assert metrics["tokens_issued"] == 0
    assert metrics["refusals_by_reason"] == {"IntegrityRefusal": 10}


@given(st.integers(0, 2**32))
def test_rng_stream_reproducible(seed):
    assert rng_stream(seed, "x").getrandbits(64) == rng_stream(seed, "x").getrandbits(64)


def test_default_timing_leaves_room_for_the_visit():
    # worst case: mail lands at the latest moment, then travel and a full session
    cfg = validate(SMALL)
    t = cfg["timing"]
    assert t["mail_delay_s"][1] + t["visit_deadline_s"] < t["qr_validity_s"]
    for seed in range(15):
        _, metrics = run_scenario(validate(dict(SMALL, users={"count": 30})), seed)
        assert metrics["refusals_total"] == 0, seed
