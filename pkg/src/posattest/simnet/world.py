"""The simulated world: people, phones, stores, and the verification round.

A *round* is one full pass from address-verification request through the
mailed QR to the in-store session. Each person is an actor whose name
doubles as the name of the phone they carry, so NFC reachability is just
"are the person and the terminal on the same location node".
"""
from __future__ import annotations

import uuid
from collections.abc import Callable
from dataclasses import dataclass, field

from .. import crypto, wire
from ..crypto import BiometricId, KeyRole
from ..protocol import (
    Backend,
    Fingerprint,
    Ink,
    PosSession,
    PosTerminal,
    Reason,
    Refusal,
    SessionState,
    UserApp,
)
from ..registry import AddressCapTable, Registry
from .engine import (
    DAY,
    Channels,
    ChannelUnavailable,
    EventLoop,
    RunLedger,
    derive_int,
    rng_stream,
)

ABROAD = "abroad"

# ledger/metrics owner classes
HONEST = "honest"
ADVERSARY = "adversary"


def home_node(address: str) -> str:
    return f"home:{address}"


@dataclass
class Person:
    pid: str
    kind: str
    address: str
    app: UserApp
    features: bytes
    in_country: bool = True
    id_matches: bool = True
    fake_id_detect_prob: float = 0.0
    prefers_ink: bool = False
    ink_qr: BiometricId | None = None
    typo_rate: float = 0.0
    plan: str | None = None

    @property
    def home(self) -> str:
        return home_node(self.address) if self.in_country else ABROAD


@dataclass
class Store:
    store_id: str
    group_id: str
    node: str
    pos: PosTerminal
    faults: list[str] = field(default_factory=list)


@dataclass
class IssuedToken:
    token: str
    pid: str
    owner: str
    plan: str | None
    session: str
    store_id: str
    platform: str
    handle: str
    location_label: str
    timestamp: int


@dataclass
class RefusalRecord:
    t: int
    pid: str
    owner: str
    plan: str | None
    reason: str


@dataclass
class RoundResult:
    tokens: list[IssuedToken] = field(default_factory=list)
    refusal: str | None = None


class World:
    def __init__(self, cfg: dict, seed: int):
        self.cfg = cfg
        self.seed = seed
        timing = cfg["timing"]
        caps = cfg["caps"]
        self.key_bits = cfg["key_bits"]
        self.platforms: list[str] = list(cfg["platforms"])
        self.horizon = (cfg["duration_days"] + 7) * DAY
        self.qr_validity = timing["qr_validity_s"]
        self.visit_window = timing["visit_deadline_s"]
        self.mail_delay_range = tuple(timing["mail_delay_s"])
        self.travel_s = timing["travel_s"]
        self.step_s = timing["step_s"]
        self.watchdog_interval = timing["watchdog_interval_s"]

        self.loop = EventLoop()
        self.ledger = RunLedger()
        self.positions: dict[str, str] = {}
        self.channels = Channels(self.loop, self.ledger, self.node_of, timing["net_latency_s"])

        census = dict(caps.get("census", {}))
        self.registry = Registry(AddressCapTable(caps["default_address_cap"], census), caps["accounts_per_platform"])
        self._registry_version = None
        self.invariant_violations: list[str] = []

        mail_keys = crypto.keygen(KeyRole.MAIL_SERVER, derive_int(seed, "key/mail"), self.key_bits)
        salt = rng_stream(seed, "biometric-salt").randbytes(16)
        self.backend = Backend(self.registry, mail_keys, salt, self.qr_validity, on_event=self.event)

        self.groups: dict[str, crypto.Keypair] = {}
        self.stores: dict[str, Store] = {}
        for store_cfg in cfg["stores"]:
            self.add_store(store_cfg["id"], store_cfg["group"], store_cfg.get("honest_employee", True),
                           timing["max_restarts"], store_cfg.get("faults", []))

        self.persons: dict[str, Person] = {}
        self.tokens: list[IssuedToken] = []
        self.refusals: list[RefusalRecord] = []
        self.purchases: list[dict] = []
        self.budgets: dict[str, float] = {}
        self.spent: dict[str, int] = {}
        self.ink_marks: dict[str, int] = {}
        self.ink_decay_s: int | None = cfg["ink_decay_s"]
        self.processes_started = 0
        for store in self.stores.values():
            self.loop.spawn(self._watchdog(store))

    # -- plumbing ----------------------------------------------------------

    @property
    def now(self) -> int:
        return self.loop.now

    def event(self, actor: str, kind: str, data: dict | None = None, payload: bytes | None = None) -> None:
        self.ledger.append(self.now, actor, kind, data, payload)

    def rng(self, label: str):
        return rng_stream(self.seed, label)

    def node_of(self, actor: str) -> str:
        return self.positions[actor]

    def move(self, actor: str, node: str) -> None:
        if self.positions.get(actor) == node:
            return
        self.positions[actor] = node
        self.event(actor, "move", {"node": node})

    def spawn(self, process, delay: int = 0) -> None:
        self.processes_started += 1
        self.loop.spawn(process, delay)

    def run(self) -> None:
        self.loop.run(until=self.horizon, after_step=self._check_registry)
        self._check_registry()

    def _check_registry(self) -> None:
        version = self.registry.version
        if version == self._registry_version:
            return
        self._registry_version = version
        for problem in self.registry.violations():
            if problem not in self.invariant_violations:
                self.invariant_violations.append(problem)

    # -- construction ------------------------------------------------------

    def group_keys(self, group_id: str) -> crypto.Keypair:
        if group_id not in self.groups:
            self.groups[group_id] = crypto.keygen(KeyRole.POS_GROUP, derive_int(self.seed, f"key/group/{group_id}"),
                                                  self.key_bits)
        return self.groups[group_id]

    def group_publics(self) -> dict[str, crypto.PublicKey]:
        return {gid: kp.public for gid, kp in self.groups.items()}

    def add_store(self, store_id: str, group_id: str, honest_employee: bool = True, max_restarts: int = 3,
                  faults: list[str] | None = None) -> Store:
        node = f"store:{store_id}"
        actor = f"pos:{store_id}"
        pos = PosTerminal(
            store_id, group_id, node,
            crypto.keygen(KeyRole.POS_DEVICE, derive_int(self.seed, f"key/pos/{store_id}"), self.key_bits),
            self.group_keys(group_id), self.backend, self.rng(f"pos/{store_id}"),
            honest_employee=honest_employee, locator=lambda: self.node_of(actor),
            on_event=self.event, max_restarts=max_restarts,
        )
        self.positions[actor] = node
        store = Store(store_id, group_id, node, pos, list(faults or []))
        self.stores[store_id] = store
        return store

    def add_person(self, pid: str, kind: str, address: str, *, in_country: bool = True, rooted: bool = False,
                   prefers_ink: bool = False, typo_rate: float = 0.0, id_matches: bool = True,
                   fake_id_detect_prob: float = 0.0, plan: str | None = None) -> Person:
        dev = uuid.UUID(bytes=self.rng(f"uuid/{pid}").randbytes(16), version=4)
        keys = crypto.keygen(KeyRole.USER_APP, derive_int(self.seed, f"key/user/{pid}"), self.key_bits)
        app = UserApp(dev, keys, self.rng(f"app/{pid}"), rooted=rooted)
        self.backend.register_device(dev, keys.public)
        person = Person(pid, kind, address, app, self.rng(f"finger/{pid}").randbytes(32), in_country=in_country,
                        id_matches=id_matches, fake_id_detect_prob=fake_id_detect_prob, prefers_ink=prefers_ink,
                        typo_rate=typo_rate, plan=plan)
        self.persons[pid] = person
        self.positions[pid] = person.home
        return person

    # -- bookkeeping -------------------------------------------------------

    def owner_of(self, person: Person, plan: str | None) -> str:
        return ADVERSARY if (plan is not None or person.kind != HONEST) else HONEST

    def refuse(self, person: Person, reason: Reason | str, plan: str | None = None, detail: str = "") -> str:
        value = reason.value if isinstance(reason, Reason) else reason
        plan = plan if plan is not None else person.plan
        owner = self.owner_of(person, plan)
        self.refusals.append(RefusalRecord(self.now, person.pid, owner, plan, value))
        data = {"reason": value, "owner": owner}
        if plan is not None:
            data["plan"] = plan
        if detail:
            data["detail"] = detail
        self.event(person.pid, "refusal", data)
        return value

    def set_budget(self, plan: str, budget: float) -> None:
        self.budgets[plan] = budget
        self.spent.setdefault(plan, 0)

    def purchase(self, plan: str, item: str, usd: int, pid: str | None = None) -> None:
        """Record adversary spend; refuses once the plan budget would be exceeded."""
        budget = self.budgets.get(plan, float("inf"))
        if self.spent.get(plan, 0) + usd > budget:
            self.event("adversary", "budget_exhausted", {"plan": plan, "item": item, "usd": usd,
                                                         "spent": self.spent.get(plan, 0)})
            raise Refusal(Reason.BUDGET, f"{plan}: {item}")
        self.spent[plan] = self.spent.get(plan, 0) + usd
        entry = {"plan": plan, "item": item, "usd": usd}
        if pid is not None:
            entry["pid"] = pid
        self.purchases.append(dict(entry, t=self.now))
        self.event("adversary", "purchase", entry)

    def ink_marked(self, pid: str) -> bool:
        marked_at = self.ink_marks.get(pid)
        if marked_at is None:
            return False
        return self.ink_decay_s is None or self.now - marked_at < self.ink_decay_s

    def _watchdog(self, store: Store):
        while self.now + self.watchdog_interval <= self.horizon:
            yield self.watchdog_interval
            store.pos.watchdog(self.node_of(store.pos.actor))

    def relocate_pos(self, store_id: str, node: str) -> None:
        store = self.stores[store_id]
        self.move(store.pos.actor, node)
        self.event(store.pos.actor, "pos_moved", {"node": node})

    # -- the verification round -------------------------------------------

    def mail_delay(self, person: Person) -> int:
        lo, hi = self.mail_delay_range
        return self.rng(f"mail/{person.pid}/{self.now}").randint(lo, hi)

    def address_round(self, person: Person, store_id: str, accounts: list[tuple[str, str]],
                      plan: str | None = None, redirect: Callable[[], tuple[str, int, Person]] | None = None,
                      site: str | None = None):
        """Request address verification, wait for the mail, scan it, visit the store.

        ``redirect`` lets an attack reroute the mail: it returns the new
        destination node, the extra delay, and the person whose phone scans
        the QR on arrival. ``site`` overrides where the person goes to meet
        the terminal.
        """
        result = RoundResult()
        app = person.app
        try:
            request = app.request_address_verification(person.address)
        except Refusal as exc:
            result.refusal = self.refuse(person, exc.reason, plan, exc.detail)
            return result
        self.event(person.pid, "address_request", {"device": str(app.device_uuid)},
                   request.signed_bytes() + request.user_sig)
        yield self.channels.net(person.pid, "backend", request.signed_bytes() + request.user_sig, "address_request")
        try:
            proof = self.backend.issue_qr(request, self.now)
        except Refusal as exc:
            result.refusal = self.refuse(person, exc.reason, plan, exc.detail)
            return result

        delay = self.mail_delay(person)
        scanner = person
        destination = None
        if redirect is not None:
            destination, extra, scanner = redirect()
            delay += extra
        mailbox: list = []
        arrival = self.channels.mail_deliver(proof, delay, home_node(person.address), destination,
                                             payload=wire.encode_qr(proof),
                                             on_arrival=lambda item, dest: mailbox.append(item))
        yield arrival - self.now
        qr = wire.decode_qr(wire.encode_qr(mailbox[0]))
        try:
            deadline = scanner.app.scan_qr(qr, self.now, self.backend.mail_public, self.visit_window)
        except Refusal as exc:
            result.refusal = self.refuse(scanner, exc.reason, plan, exc.detail)
            return result
        self.event(scanner.pid, "qr_scan_ok", {"device": str(scanner.app.device_uuid), "expires_at": qr.expires_at,
                                               "deadline": deadline})
        visit = yield from self.visit(scanner, store_id, accounts, plan, site)
        scanner.app.end_round()
        return visit

    def visit(self, person: Person, store_id: str, accounts: list[tuple[str, str]], plan: str | None = None,
              site: str | None = None):
        result = RoundResult()
        store = self.stores[store_id]
        pos = store.pos
        target = site or store.node
        if person.in_country and self.node_of(person.pid) != target:
            yield self.travel_s
            self.move(person.pid, target)
        session: PosSession | None = None
        try:
            session = pos.open_session(self.now)
            proof = person.app.present_qr(self.now)
            self.channels.nfc(person.pid, pos.actor, wire.encode_qr(proof), "qr_present", session.session_id)
            id_ok = pos.employee_id_check(self._id_check(person))
            pos.verify_qr(session, proof, id_ok, self.now)
            yield self.step_s
            if "skip_sentience" in store.faults:
                # compromised terminal: jumps ahead without running the challenge
                session.state = SessionState.SENTIENCE_OK
            else:
                yield from self._sentience(person, pos, session)
            yield self.step_s
            self._uniqueness(person, pos, session)
            for platform, handle in accounts:
                yield self.step_s
                try:
                    token = yield from self._attest_one(person, store, session, platform, handle, plan)
                    result.tokens.append(token)
                except Refusal as exc:
                    result.refusal = self.refuse(person, exc.reason, plan, exc.detail)
                    if exc.reason not in (Reason.CAP_REACHED, Reason.SECOND_ACCOUNT, Reason.NOT_LOGGED_IN):
                        raise _Abort()
            pos.close(session)
        except Refusal as exc:
            result.refusal = self.refuse(person, exc.reason, plan, exc.detail)
        except ChannelUnavailable as exc:
            result.refusal = self.refuse(person, Reason.CHANNEL, plan, str(exc))
            if session is not None:
                pos.abort(session, Reason.CHANNEL)
        except _Abort:
            if session is not None and session.state is not SessionState.FAILED:
                pos.abort(session, Reason(result.refusal))
        if person.in_country and self.node_of(person.pid) != person.home:
            yield self.travel_s
            self.move(person.pid, person.home)
        return result

    def _id_check(self, person: Person) -> bool:
        if not person.id_matches:
            return False
        if person.fake_id_detect_prob > 0:
            return self.rng(f"idcheck/{person.pid}/{self.now}").random() >= person.fake_id_detect_prob
        return True

    def _sentience(self, person: Person, pos: PosTerminal, session: PosSession):
        challenge = pos.issue_challenge(session, self.now)
        typo_rng = self.rng(f"typo/{person.pid}/{self.now}")
        while True:
            self.channels.nfc(pos.actor, person.pid, challenge.encode(), "challenge", session.session_id)
            code = person.app.decode_challenge(challenge, pos.device_keys.public)
            yield self.step_s
            entered = code
            if person.typo_rate and typo_rng.random() < person.typo_rate:
                entered = f"{(int(code) + 1) % 10 ** len(code):0{len(code)}d}"
            challenge = pos.check_code(session, entered, self.now)
            if challenge is None:
                return

    def _uniqueness(self, person: Person, pos: PosTerminal, session: PosSession) -> None:
        if person.prefers_ink:
            choice = Ink(presented=person.ink_qr, marked=self.ink_marked(person.pid))
        else:
            choice = Fingerprint(person.features)
        result = pos.capture_uniqueness(session, choice, self.now)
        if result.ink_qr is not None:
            person.ink_qr = result.ink_qr
            self.ink_marks[person.pid] = self.now
            self.event(pos.actor, "ink_issued", {"session": session.session_id, "pid": person.pid})

    def _attest_one(self, person: Person, store: Store, session: PosSession, platform: str, handle: str,
                    plan: str | None):
        pos = store.pos
        app = person.app
        label, ts = pos.announce(session, platform, self.now)
        self.channels.nfc(pos.actor, person.pid, f"{platform}|{label}|{ts}".encode(), "announce", session.session_id)
        blinded, commitment = app.prepare_attestation(platform, handle, label, ts, self.groups[store.group_id].public)
        yield self.channels.net(person.pid, "backend", commitment.encode(), "commitment")
        self.backend.stage_commitment(app.device_uuid, platform, commitment)
        self.channels.nfc(person.pid, pos.actor, blinded, "blinded", session.session_id)
        blind_sig = pos.sign_attestation(session, platform, blinded, self.now)
        self.channels.nfc(pos.actor, person.pid, blind_sig, "blind_signature", session.session_id)
        token = app.finish_attestation(platform, blind_sig)
        issued = IssuedToken(token.to_string(), person.pid, self.owner_of(person, plan), plan, session.session_id,
                             store.store_id, platform, handle, label, ts)
        self.tokens.append(issued)
        data = {"session": session.session_id, "store": store.store_id, "platform": platform,
                "location_label": label, "timestamp": ts, "owner": issued.owner}
        if plan is not None:
            data["plan"] = plan
        self.event(person.pid, "token", data, issued.token.encode())
        return issued


class _Abort(Exception):
    pass
