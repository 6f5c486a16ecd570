"""Attack cost model and the attack strategies that run inside a world.

The cost model is linear: every head costs the same, so a plan with ``k``
heads costs ``k`` times one head. Case 1 rents verified residents
(colluders); case 2 fabricates identities (Sybils) under one of three
verification techniques.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .protocol import Refusal
from .simnet.engine import DAY
from .simnet.world import ABROAD, HONEST, World


class Technique(enum.Enum):
    BASELINE = "baseline"
    CREDIT_CARD = "credit_card"
    ADDRESS = "address"


TECHNIQUE_LABELS = {
    Technique.BASELINE: "Baseline",
    Technique.CREDIT_CARD: "Credit Card",
    Technique.ADDRESS: "User Address",
}


@dataclass(frozen=True)
class CostParams:
    fake_id_usd: int = 200
    credit_card_usd: int = 100
    credit_cards_per_month: int = 4
    fake_ids_per_month_credit_card: int = 4
    incentive_per_verification_usd: int = 1000
    incentive_monthly_usd: int = 4000
    rent_monthly_usd: int = 1500
    ads_monthly_usd: int = 5000
    target_tweets_monthly: int = 430_000
    tweets_per_account_monthly: int = 70
    accounts_per_person: int = 2
    rounding_granularity: int = 100
    verifications_per_month: int = 4
    # priced by nobody; leave as None unless a scenario wants to explore them
    stolen_biometric_usd: int | None = None
    data_breach_usd: int | None = None
    pos_break_in_usd: int | None = None

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValueError(f"{f.name} must be an integer, got {value!r}")
            if value < 0:
                raise ValueError(f"{f.name} must be non-negative")
        for name in ("target_tweets_monthly", "tweets_per_account_monthly", "accounts_per_person",
                     "rounding_granularity", "verifications_per_month"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> CostParams:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown cost parameters: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CostRow:
    technique: Technique
    one_time_usd: int
    recurring_monthly_usd: int
    headcount: int

    @property
    def first_month_usd(self) -> int:
        return self.one_time_usd + self.recurring_monthly_usd


@dataclass(frozen=True)
class CostReport:
    accounts: int
    case1_headcount: int
    case1_monthly_usd: int
    case2_headcount: int
    rows: tuple[CostRow, ...]

    def row(self, technique: Technique) -> CostRow:
        return next(r for r in self.rows if r.technique is technique)


def _round_up(value: int, granularity: int) -> int:
    return -(-value // granularity) * granularity


def accounts_needed(params: CostParams) -> int:
    raw = math.ceil(params.target_tweets_monthly / params.tweets_per_account_monthly)
    return _round_up(raw, params.rounding_granularity)


def case1_headcount(params: CostParams) -> int:
    # each colluder lends one of their two slots
    return accounts_needed(params)


def case2_headcount(params: CostParams) -> int:
    return math.ceil(accounts_needed(params) / params.accounts_per_person)


def cost_case1(params: CostParams, heads: int | None = None) -> int:
    heads = case1_headcount(params) if heads is None else heads
    return heads * params.incentive_monthly_usd + params.ads_monthly_usd


def cost_case2(technique: Technique, params: CostParams, heads: int | None = None) -> CostRow:
    heads = case2_headcount(params) if heads is None else heads
    if technique is Technique.BASELINE:
        return CostRow(technique, heads * params.fake_id_usd, 0, heads)
    if technique is Technique.CREDIT_CARD:
        per_head = (params.credit_cards_per_month * params.credit_card_usd
                    + params.incentive_monthly_usd
                    + params.fake_ids_per_month_credit_card * params.fake_id_usd)
        return CostRow(technique, 0, heads * per_head, heads)
    if technique is Technique.ADDRESS:
        return CostRow(technique, heads * params.fake_id_usd,
                       heads * (params.rent_monthly_usd + params.incentive_monthly_usd), heads)
    raise ValueError(technique)


def cost_report(params: CostParams | None = None) -> CostReport:
    params = params or CostParams()
    return CostReport(
        accounts=accounts_needed(params),
        case1_headcount=case1_headcount(params),
        case1_monthly_usd=cost_case1(params),
        case2_headcount=case2_headcount(params),
        rows=tuple(cost_case2(t, params) for t in Technique),
    )


def breakdown_rows(params: CostParams) -> list[list[str]]:
    """Per-head line items for case 2, one row per item."""
    p = params
    cc, ids = p.credit_cards_per_month, p.fake_ids_per_month_credit_card
    return [
        ["Baseline", "Fake IDs", str(p.fake_id_usd), "-"],
        ["Credit Card", f"Credit card (x{cc})", "-", f"{p.credit_card_usd} (x{cc})"],
        ["Credit Card", "Incentives", "-", str(p.incentive_monthly_usd)],
        ["Credit Card", f"Fake ID (x{ids})", "-", f"{p.fake_id_usd} (x{ids})"],
        ["User Address", "Rented Space", "-", str(p.rent_monthly_usd)],
        ["User Address", "Incentives", "-", str(p.incentive_monthly_usd)],
        ["User Address", "Fake ID", str(p.fake_id_usd), "-"],
    ]


def totals_rows(report: CostReport) -> list[list[str]]:
    rows = []
    for r in report.rows:
        recurring = str(r.recurring_monthly_usd) if r.recurring_monthly_usd else "-"
        rows.append([TECHNIQUE_LABELS[r.technique], str(r.first_month_usd), recurring, str(r.headcount)])
    rows.append(["Case 1 (colluders)", str(report.case1_monthly_usd), str(report.case1_monthly_usd),
                 str(report.case1_headcount)])
    return rows


def unit_cost_rows(params: CostParams) -> list[list[str]]:
    def priced(v):
        return "unknown (non-zero)" if v is None else str(v)
    return [
        ["Fake IDs", f"{params.fake_id_usd} per ID"],
        ["Fake credit cards", f"{params.credit_card_usd} per card"],
        ["Breaking in to POS system", priced(params.pos_break_in_usd)],
        ["Data breach", priced(params.data_breach_usd)],
        ["Stolen biometrics", priced(params.stolen_biometric_usd)],
        ["Fake address (rent)", f"{params.rent_monthly_usd} per month"],
        ["Incentive", f"{params.incentive_per_verification_usd} per verification"],
    ]


BREAKDOWN_HEADER = ["Verification Technique", "Item", "One-time Cost", "Recurring Cost P.M."]
TOTALS_HEADER = ["Verification Technique", "Initial Setup (1st Month)", "Recurring Cost P.M.", "Headcount"]
UNIT_HEADER = ["Attack Vector", "Cost"]


def _csv(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_cost_tables(params: CostParams, out: str | Path) -> dict[str, Path]:
    """Write the totals table to ``out`` and the breakdown/unit tables beside it."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report = cost_report(params)
    paths = {
        "totals": out,
        "breakdown": out.with_name(out.stem + "_breakdown.csv"),
        "unit_costs": out.with_name(out.stem + "_unit_costs.csv"),
    }
    paths["totals"].write_text(_csv(TOTALS_HEADER, totals_rows(report)))
    paths["breakdown"].write_text(_csv(BREAKDOWN_HEADER, breakdown_rows(params)))
    paths["unit_costs"].write_text(_csv(UNIT_HEADER, unit_cost_rows(params)))
    return paths


# -- executable plans -------------------------------------------------------

class PlanKind(enum.Enum):
    COLLUDER = "colluder"
    SYBIL = "sybil"


@dataclass
class AttackPlan:
    plan_id: str
    kind: PlanKind
    technique: Technique | None = None
    budget_usd: float = float("inf")
    operatives: int = 0
    in_country: int | None = None
    address_pool: int = 1
    recruits: int = 0
    acceptance: float = 1.0
    rounds: int = 4
    round_interval_s: int = 7 * DAY
    start_s: int = 0
    stores: list[str] = field(default_factory=list)
    fake_id_detect_prob: float = 0.0
    params: CostParams = field(default_factory=CostParams)

    def __post_init__(self):
        if self.kind is PlanKind.SYBIL and self.technique is None:
            raise ValueError("a Sybil plan needs a technique")
        if self.in_country is None:
            self.in_country = self.operatives
        if not 0 <= self.in_country <= self.operatives:
            raise ValueError("in_country must be between 0 and operatives")
        if not 0.0 <= self.acceptance <= 1.0:
            raise ValueError("acceptance must be a probability")
        if self.address_pool < 1:
            raise ValueError("address_pool must be at least 1")


@dataclass
class AttackOutcome:
    plan_id: str
    accounts_attested: int
    tokens: int
    spend_usd: int
    closed_form_usd: int
    heads: int
    budget_exhausted: bool
    bottleneck: dict[str, int]

    def to_json(self) -> dict:
        return asdict(self)


class AttackTracker:
    """Live handle on a launched plan; read it after the world has run."""

    def __init__(self, plan: AttackPlan, world: World):
        self.plan = plan
        self.world = world
        self.heads = 0
        self.budget_exhausted = False

    def closed_form_usd(self) -> int:
        p = self.plan.params
        if self.plan.kind is PlanKind.COLLUDER:
            return cost_case1(p, self.heads)
        return cost_case2(self.plan.technique, p, self.heads).first_month_usd

    def outcome(self) -> AttackOutcome:
        pid = self.plan.plan_id
        mine = [t for t in self.world.tokens if t.plan == pid]
        accounts = {(t.platform, t.handle) for t in mine}
        bottleneck: dict[str, int] = {}
        for r in self.world.refusals:
            if r.plan == pid:
                bottleneck[r.reason] = bottleneck.get(r.reason, 0) + 1
        return AttackOutcome(
            plan_id=pid,
            accounts_attested=len(accounts),
            tokens=len(mine),
            spend_usd=self.world.spent.get(pid, 0),
            closed_form_usd=self.closed_form_usd(),
            heads=self.heads,
            budget_exhausted=self.budget_exhausted,
            bottleneck=dict(sorted(bottleneck.items())),
        )


def launch_attack(plan: AttackPlan, world: World) -> AttackTracker:
    tracker = AttackTracker(plan, world)
    world.set_budget(plan.plan_id, plan.budget_usd)
    stores = plan.stores or list(world.stores)
    if plan.kind is PlanKind.SYBIL:
        for i in range(plan.operatives):
            in_country = i < plan.in_country
            if plan.technique is Technique.ADDRESS:
                address = f"{plan.plan_id}-rent-{i:04d}"
            else:
                address = f"{plan.plan_id}-pool-{i % plan.address_pool:04d}"
            person = world.add_person(f"op:{plan.plan_id}-{i:04d}", "operative", address, in_country=in_country,
                                      fake_id_detect_prob=plan.fake_id_detect_prob, plan=plan.plan_id)
            tracker.heads += 1
            world.spawn(_sybil_operative(tracker, person, stores[i % len(stores)]), plan.start_s)
    else:
        world.spawn(_colluder_campaign(tracker, stores), plan.start_s)
    return tracker


def run_attack(plan: AttackPlan, world: World) -> AttackOutcome:
    tracker = launch_attack(plan, world)
    world.run()
    return tracker.outcome()


def _pay(tracker: AttackTracker, item: str, usd: int, pid: str | None = None) -> None:
    try:
        tracker.world.purchase(tracker.plan.plan_id, item, usd, pid)
    except Refusal:
        tracker.budget_exhausted = True
        raise


def _sybil_operative(tracker: AttackTracker, person, store_id: str):
    plan, world, p = tracker.plan, tracker.world, tracker.plan.params
    tech = plan.technique
    try:
        if tech in (Technique.BASELINE, Technique.ADDRESS):
            _pay(tracker, "fake_id", p.fake_id_usd, person.pid)
        if tech is Technique.ADDRESS:
            _pay(tracker, "rent", p.rent_monthly_usd, person.pid)
        if tech in (Technique.CREDIT_CARD, Technique.ADDRESS):
            _pay(tracker, "incentive", p.incentive_monthly_usd, person.pid)
    except Refusal as exc:
        world.refuse(person, exc.reason, plan.plan_id, exc.detail)
        return
    for k in range(plan.rounds):
        round_start = world.now
        if tech is Technique.CREDIT_CARD:
            try:
                _pay(tracker, "credit_card", p.credit_card_usd, person.pid)
                _pay(tracker, "fake_id", p.fake_id_usd, person.pid)
            except Refusal as exc:
                world.refuse(person, exc.reason, plan.plan_id, exc.detail)
                return
        # a fresh handle each round: the adversary wants as many accounts as it can get
        accounts = [(platform, f"{person.pid.split(':')[1]}-{platform}-{k}") for platform in world.platforms]
        for platform, handle in accounts:
            person.app.login(platform, handle)
        yield from world.address_round(person, store_id, accounts, plan.plan_id)
        wait = round_start + plan.round_interval_s - world.now
        if k + 1 < plan.rounds and wait > 0:
            yield wait


def _colluder_campaign(tracker: AttackTracker, stores: list[str]):
    plan, world, p = tracker.plan, tracker.world, tracker.plan.params
    try:
        _pay(tracker, "ads", p.ads_monthly_usd)
    except Refusal:
        world.event("adversary", "plan_stopped", {"plan": plan.plan_id})
        return
    # give residents time to finish their own first verification
    yield plan.round_interval_s - 1 * DAY if plan.round_interval_s > DAY else 0
    rng = world.rng(f"recruit/{plan.plan_id}")
    candidates = [person for person in world.persons.values()
                  if person.kind == HONEST and person.plan is None and person.app.tokens]
    recruited = []
    for person in candidates:
        if len(recruited) >= plan.recruits:
            break
        accepted = rng.random() < plan.acceptance
        world.event("adversary", "recruit", {"plan": plan.plan_id, "pid": person.pid, "accepted": accepted})
        if accepted:
            person.plan = plan.plan_id
            recruited.append(person)
    tracker.heads = len(recruited)
    yield 1 * DAY if plan.round_interval_s > DAY else 0
    for i, person in enumerate(recruited):
        world.spawn(_colluder(tracker, person, i, stores))


def _colluder(tracker: AttackTracker, person, index: int, stores: list[str]):
    plan, world, p = tracker.plan, tracker.world, tracker.plan.params
    accounts = [(platform, f"{plan.plan_id}-c{index:04d}-{platform}") for platform in world.platforms]
    for platform, handle in accounts:
        person.app.login(platform, handle)
    store_id = stores[index % len(stores)]
    for k in range(plan.rounds):
        round_start = world.now
        try:
            _pay(tracker, "incentive", p.incentive_per_verification_usd, person.pid)
        except Refusal as exc:
            world.refuse(person, exc.reason, plan.plan_id, exc.detail)
            return
        yield from world.address_round(person, store_id, accounts, plan.plan_id)
        wait = round_start + plan.round_interval_s - world.now
        if k + 1 < plan.rounds and wait > 0:
            yield wait


# -- non-Sybil attack vectors ------------------------------------------------

def launch_mail_redirect(world: World, plan_id: str, attackers: int, mode: str, redirect_extra_s: int,
                         victims: list[str], stores: list[str]) -> None:
    """Remote attackers request QRs for residents' addresses and reroute the mail.

    ``mode="delay"`` forwards the mail abroad to the requesting phone, which
    costs days; ``mode="other_device"`` hands it to an in-country accomplice
    whose phone did not make the request.
    """
    for i in range(attackers):
        address = victims[i % len(victims)]
        attacker = world.add_person(f"atk:{plan_id}-{i:04d}", "attacker", address, in_country=False, plan=plan_id)
        if mode == "other_device":
            accomplice = world.add_person(f"acc:{plan_id}-{i:04d}", "attacker", f"{plan_id}-drop-{i:04d}",
                                          plan=plan_id)
            redirect = (lambda acc=accomplice: (acc.home, redirect_extra_s, acc))
        else:
            redirect = (lambda atk=attacker: (ABROAD, redirect_extra_s, atk))
        accounts = [(platform, f"{plan_id}-{i:04d}-{platform}") for platform in world.platforms]
        for platform, handle in accounts:
            attacker.app.login(platform, handle)
        world.spawn(world.address_round(attacker, stores[i % len(stores)], accounts, plan_id, redirect=redirect),
                    i)


def launch_pos_relocation(world: World, plan_id: str, store_id: str, at_s: int, to_node: str, attackers: int,
                          reregister_at_s: int | None = None) -> None:
    """Move a terminal to an adversary site and send operatives there."""
    def relocate():
        yield at_s
        world.relocate_pos(store_id, to_node)
        if reregister_at_s is not None:
            yield max(0, reregister_at_s - world.now)
            world.stores[store_id].pos.reregister(to_node)
            world.stores[store_id].node = to_node
    world.spawn(relocate())
    for i in range(attackers):
        person = world.add_person(f"op:{plan_id}-{i:04d}", "operative", f"{plan_id}-pool-{i:04d}", plan=plan_id)
        accounts = [(platform, f"{plan_id}-{i:04d}-{platform}") for platform in world.platforms]
        for platform, handle in accounts:
            person.app.login(platform, handle)
        world.spawn(world.address_round(person, store_id, accounts, plan_id, site=to_node), at_s)

