"""One line per acceptance criterion, at the stated tolerances."""
import csv
import random
import time
import uuid

import pytest
from test_crypto import TOY, _units
from test_registry import Model, _drive

from posattest import wire
from posattest.adversary import (
    AttackPlan,
    CostParams,
    PlanKind,
    Technique,
    accounts_needed,
    case1_headcount,
    case2_headcount,
    cost_case2,
    run_attack,
)
from posattest.cli import main
from posattest.crypto import BiometricId, BlindingFactor, blind_representative
from posattest.registry import AddressCapTable, Registry, Upsert
from posattest.simnet.scenario import (
    bundled_scenario_path,
    bundled_scenarios,
    load_scenario,
    run_scenario,
    run_world,
    validate,
)
from posattest.simnet.world import ADVERSARY, World
from posattest.trilemma import sweep
from posattest.verifier import verify_token


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return _report


def test_criterion_1_cost_tables(tmp_path, report):
    t0 = time.perf_counter()
    main(["cost", "--out", str(tmp_path / "t4.csv")])
    elapsed = time.perf_counter() - t0
    rows = {r[0]: r for r in csv.reader((tmp_path / "t4.csv").open())}
    baseline = int(rows["Baseline"][1])
    card = int(rows["Credit Card"][2])
    addr_first, addr_rec = int(rows["User Address"][1]), int(rows["User Address"][2])
    case1 = int(rows["Case 1 (colluders)"][1])
    ok = (abs(baseline - 600_000) <= 50_000 and abs(card - 16_100_000) <= 100_000
          and abs(addr_first - 17_600_000) <= 100_000 and abs(addr_rec - 17_100_000) <= 100_000
          and abs(case1 - 25_000_000) <= 250_000 and elapsed < 1)
    report(1, ok, f"baseline={baseline} card={card} address={addr_first}/{addr_rec} case1={case1} "
                  f"in {elapsed:.3f}s")


def test_criterion_2_headcounts(report):
    t0 = time.perf_counter()
    p = CostParams()
    got = (case1_headcount(p), case2_headcount(p), accounts_needed(CostParams(rounding_granularity=1)))
    elapsed = time.perf_counter() - t0
    report(2, got == (6200, 3100, 6143) and elapsed < 1, f"case1={got[0]} case2={got[1]} g1={got[2]} "
                                                            f"in {elapsed:.3f}s")


def test_criterion_3_honest_end_to_end(report):
    cfg = load_scenario(bundled_scenario_path("honest_100.json"))
    t0 = time.perf_counter()
    world, metrics = run_world(cfg, 0)
    elapsed = time.perf_counter() - t0
    keys = world.group_publics()
    verified = sum(verify_token(t.token, keys, world.now).accepted for t in world.tokens)
    ok = (len(cfg["stores"]) == 3 and len(cfg["platforms"]) == 2 and cfg["users"]["count"] == 100
          and metrics["tokens_issued"] == 200 and verified == 200 and metrics["refusals_total"] == 0
          and elapsed < 5)
    report(3, ok, f"tokens={metrics['tokens_issued']} verified={verified} refusals={metrics['refusals_total']} "
                  f"in {elapsed:.2f}s")


def test_criterion_4_rate_limits(report):
    caps = {"addr0": 1, "addr1": 6}
    ops = 0
    for seed in range(4):
        ops += _drive(Registry(AddressCapTable(4, caps)), Model(caps), random.Random(100 + seed), 3000, 80)
    reg = Registry()
    reg.register_device(uuid.UUID(int=1))
    _, rec = reg.record_biometric(BiometricId("fingerprint", "f"), "a", uuid.UUID(int=1))
    reg.attest_account(rec.record_id, "tw", "c", "g", 1)
    overwritten = reg.attest_account(rec.record_id, "tw", "c", "g", 2) is Upsert.OVERWRITTEN
    ok = ops >= 10_000 and overwritten and rec.per_platform_counts["tw"] == 1
    report(4, ok, f"{ops} randomized operations against a reference model, overwrite keeps count "
                  f"{rec.per_platform_counts['tw']}")


def test_criterion_5_attack_vectors(report):
    _, redirect = run_scenario(load_scenario(bundled_scenario_path("mail_redirect.json")), 0)
    redirect_ok = (redirect["adversary_tokens"] == 0
                   and set(redirect["refusals_by_owner"][ADVERSARY]) <= {"Expired", "WrongDevice"}
                   and redirect["refusals_by_owner"][ADVERSARY])
    _, reloc = run_scenario(load_scenario(bundled_scenario_path("pos_relocation.json")), 0)
    reloc_ok = reloc["pos_alerts"] == 1 and reloc["tokens_after_alert"] == 0 and reloc["adversary_tokens"] == 0

    base = {"duration_days": 30, "platforms": ["twitter", "facebook"],
            "stores": [{"id": "s1", "group": "g1"}, {"id": "s2", "group": "g2"}]}
    zero = run_attack(AttackPlan("z", PlanKind.SYBIL, Technique.ADDRESS, operatives=0),
                      World(validate(base), 0))
    zero_ok = zero.tokens == 0

    k, p = 8, 2
    sybil_ok = True
    spends = []
    for tech in Technique:
        out = run_attack(AttackPlan("s", PlanKind.SYBIL, tech, operatives=k, address_pool=k),
                         World(validate(base), 1))
        closed = cost_case2(tech, CostParams(), k).first_month_usd
        spends.append((tech.value, out.spend_usd, closed))
        sybil_ok &= out.accounts_attested <= 2 * k * p and out.spend_usd == closed
    ok = redirect_ok and reloc_ok and zero_ok and sybil_ok
    report(5, ok, f"redirect adversary tokens={redirect['adversary_tokens']} "
                  f"reasons={redirect['refusals_by_owner'][ADVERSARY]}; relocation tokens after alert="
                  f"{reloc['tokens_after_alert']}; zero-operative tokens={zero.tokens}; "
                  f"sybil spend vs closed form={spends}")


def test_criterion_6_blindness(report):
    cfg = validate({"duration_days": 5, "platforms": ["tw", "fb", "ig", "yt"],
                    "stores": [{"id": "s1", "group": "g1"}, {"id": "s2", "group": "g2"}],
                    "users": {"count": 260}})
    world, _ = run_world(cfg, 0)
    transcript = [entry for store in world.stores.values() for entry in store.pos.transcript]
    leaks = 0
    for tok in world.tokens:
        person = world.persons[tok.pid]
        needles = (f"{tok.platform}:{tok.handle}".encode(), wire.canonical_bytes(
            wire.CanonicalAttestationMessage(tok.platform, tok.handle, tok.location_label, tok.timestamp)),
            person.app.commitment(tok.platform, tok.handle).encode())
        leaks += sum(1 for entry in transcript for needle in needles if needle in entry)
    handle_hits = sum(1 for tok in world.tokens for entry in transcript if tok.handle.encode() in entry)

    n = TOY.public.n
    units = _units(n)
    uniform = all(sorted(blind_representative(h, BlindingFactor(r, n), TOY.public) for r in units) == units
                  for h in units)
    ok = len(world.tokens) >= 1000 and leaks == 0 and handle_hits == 0 and uniform
    report(6, ok, f"{len(world.tokens)} attestations, {len(transcript)} signer transcript entries, "
                  f"{leaks + handle_hits} handle-derived hits; toy n={n} blinding uniform={uniform}")


def test_criterion_7_determinism(report):
    digests = {}
    for name in bundled_scenarios():
        cfg = load_scenario(bundled_scenario_path(name))
        digests[name] = {run_scenario(cfg, 7)[0].digest() for _ in range(3)}
    ok = len(digests) == 5 and all(len(d) == 1 for d in digests.values())
    report(7, ok, ", ".join(f"{k}={next(iter(v))[:12]}" for k, v in sorted(digests.items())))


def test_criterion_8_trilemma(report):
    t0 = time.perf_counter()
    honest = sweep(4, [], 1000)
    byz = sweep(4, [3], 1000)
    anchored = [o for b in ([], [3], [1, 3]) for o in sweep(4, b, 1000, anchor=0)]
    elapsed = time.perf_counter() - t0
    honest_ok = sum(o.agreement for o in honest)
    byz_broken = sum(not o.agreement for o in byz)
    anchor_ok = sum(o.agreement for o in anchored)
    ok = honest_ok == 1000 and byz_broken >= 1 and anchor_ok == len(anchored) and elapsed < 10
    report(8, ok, f"honest agreement {honest_ok}/1000; equivocator NoAgreement {byz_broken}/1000; "
                  f"anchor agreement {anchor_ok}/{len(anchored)}; {elapsed:.2f}s")
