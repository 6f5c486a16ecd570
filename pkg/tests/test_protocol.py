import random
import uuid

from conftest import cached_keys

from posattest import wire
from posattest.crypto import KeyRole
from posattest.protocol import (
    Backend,
    Fingerprint,
    Ink,
    PosTerminal,
    Reason,
    Refusal,
    SessionState,
    UserApp,
    Watchdog,
    code_from_nonce,
)
from posattest.registry import AddressCapTable, Registry, Upsert

HOME = "store:s1"


class Rig:
    def __init__(self, cap=4, honest_employee=True, max_restarts=3):
        self.events = []
        self.registry = Registry(AddressCapTable(cap))
        self.backend = Backend(self.registry, cached_keys(KeyRole.MAIL_SERVER, 3), b"salt",
                               on_event=self._log)
        self.node = HOME
        self.pos = PosTerminal("s1", "metro", HOME, cached_keys(KeyRole.POS_DEVICE, 4),
                               cached_keys(KeyRole.POS_GROUP, 11), self.backend, random.Random(9),
                               honest_employee=honest_employee, locator=lambda: self.node,
                               on_event=self._log, max_restarts=max_restarts)
        self.apps = 0

    def _log(self, actor, kind, data, payload=b""):
        self.events.append((actor, kind, data))

    def app(self, rooted=False):
        self.apps += 1
        app = UserApp(uuid.UUID(int=self.apps), cached_keys(KeyRole.USER_APP, self.apps), random.Random(self.apps),
                      rooted=rooted)
        self.backend.register_device(app.device_uuid, app.keys.public)
        return app

    def qr(self, app, address="1 Elm", now=0):
        proof = self.backend.issue_qr(app.request_address_verification(address), now)
        app.scan_qr(proof, now + 3600, self.backend.mail_public)
        return proof

    def through_uniqueness(self, app, now=3600, features=b"finger", choice=None):
        s = self.pos.open_session(now)
        self.pos.verify_qr(s, app.present_qr(now), self.pos.employee_id_check(True), now)
        ch = self.pos.issue_challenge(s, now)
        assert self.pos.check_code(s, app.decode_challenge(ch, self.pos.device_keys.public), now) is None
        self.pos.capture_uniqueness(s, choice or Fingerprint(features), now)
        return s

    def attest(self, app, s, platform, handle, now=3600):
        app.login(platform, handle)
        label, ts = self.pos.announce(s, platform, now)
        blinded, commitment = app.prepare_attestation(platform, handle, label, ts, self.pos.group_keys.public)
        self.backend.stage_commitment(app.device_uuid, platform, commitment)
        return app.finish_attestation(platform, self.pos.sign_attestation(s, platform, blinded, now))


class _Raises:
    def __init__(self, reason):
        self.reason = reason

    def __enter__(self):
        return self

    def __exit__(self, tp, exc, tb):
        assert tp is Refusal, f"expected Refusal({self.reason}), got {tp}"
        assert exc.reason is self.reason, exc.reason
        return True


def test_full_flow_issues_verifiable_token():
    rig = Rig()
    app = rig.app()
    rig.qr(app)
    s = rig.through_uniqueness(app)
    token = rig.attest(app, s, "twitter", "alice")
    rig.pos.close(s)
    assert s.state is SessionState.DONE
    assert token.verify(rig.pos.group_keys.public)
    msg, _, _ = wire.parse_token(token.to_string())
    assert (msg.handle, msg.location_label, msg.timestamp) == ("alice", "metro", 3600)


def test_unknown_device_refused():
    rig = Rig()
    stranger = UserApp(uuid.UUID(int=999), cached_keys(KeyRole.USER_APP, 99), random.Random(0))
    with _Raises(Reason.UNKNOWN_DEVICE):
        rig.backend.issue_qr(stranger.request_address_verification("x"), 0)


def test_forged_request_refused():
    rig = Rig()
    app = rig.app()
    req = app.request_address_verification("x")
    forged = type(req)(req.address, req.device_uuid, bytes(32), req.user_sig)
    with _Raises(Reason.BAD_REQUEST):
        rig.backend.issue_qr(forged, 0)


def test_rooted_device_refused():
    rig = Rig()
    with _Raises(Reason.INTEGRITY):
        rig.app(rooted=True).request_address_verification("x")


def test_address_cap_at_request():
    rig = Rig(cap=1)
    rig.qr(rig.app())
    with _Raises(Reason.ADDRESS_CAP):
        rig.qr(rig.app())


def test_scan_checks():
    rig = Rig()
    app, other = rig.app(), rig.app()
    proof = rig.backend.issue_qr(app.request_address_verification("a"), 0)
    with _Raises(Reason.WRONG_DEVICE):
        other.scan_qr(proof, 10, rig.backend.mail_public)
    with _Raises(Reason.EXPIRED):
        app.scan_qr(proof, proof.expires_at + 1, rig.backend.mail_public)
    # exactly at the boundary is still fine
    app.scan_qr(proof, proof.expires_at, rig.backend.mail_public)
    with _Raises(Reason.BAD_SIGNATURE):
        app.scan_qr(proof.with_signature(b"\x00" * 64), 10, rig.backend.mail_public)


def test_visit_deadline():
    rig = Rig()
    app = rig.app()
    rig.qr(app)
    with _Raises(Reason.DEADLINE):
        app.present_qr(3600 + 2 * 3600 + 1)


def test_id_rejected_by_honest_employee_only():
    rig = Rig()
    app = rig.app()
    rig.qr(app)
    s = rig.pos.open_session(3600)
    with _Raises(Reason.ID_REJECTED):
        rig.pos.verify_qr(s, app.present_qr(3600), rig.pos.employee_id_check(False), 3600)
    assert s.state is SessionState.FAILED
    corrupt = Rig(honest_employee=False)
    assert corrupt.pos.employee_id_check(False) is True


def test_wrong_code_restarts_then_fails():
    rig = Rig(max_restarts=2)
    app = rig.app()
    rig.qr(app)
    s = rig.pos.open_session(3600)
    rig.pos.verify_qr(s, app.present_qr(3600), True, 3600)
    ch = rig.pos.issue_challenge(s, 3600)
    first = ch.nonce
    ch = rig.pos.check_code(s, "bad", 3601)
    assert ch is not None and ch.nonce != first and s.restarts == 1
    rig.pos.check_code(s, "bad", 3602)
    with _Raises(Reason.TOO_MANY_RESTARTS):
        rig.pos.check_code(s, "bad", 3603)


def test_code_from_nonce_is_six_digits():
    assert code_from_nonce(b"\x00" * 32) == "000000"
    assert code_from_nonce((1234567).to_bytes(32, "big")) == "234567"


def test_challenge_signature_checked():
    rig = Rig()
    app = rig.app()
    rig.qr(app)
    s = rig.pos.open_session(3600)
    rig.pos.verify_qr(s, app.present_qr(3600), True, 3600)
    ch = rig.pos.issue_challenge(s, 3600)
    with _Raises(Reason.BAD_SIGNATURE):
        app.decode_challenge(ch, cached_keys(KeyRole.POS_DEVICE, 5).public)


def test_steps_out_of_order_refused():
    rig = Rig()
    app = rig.app()
    rig.qr(app)
    s = rig.pos.open_session(3600)
    with _Raises(Reason.BAD_STATE):
        rig.pos.capture_uniqueness(s, Fingerprint(b"f"), 3600)


def test_one_account_per_platform_per_session():
    rig = Rig()
    app = rig.app()
    rig.qr(app)
    s = rig.through_uniqueness(app)
    rig.attest(app, s, "twitter", "alice")
    with _Raises(Reason.SECOND_ACCOUNT):
        rig.attest(app, s, "twitter", "alice_biz")
    rig.attest(app, s, "facebook", "alice")


def test_third_account_refused_and_reverification_overwrites():
    rig = Rig()
    app = rig.app()
    for i, handle in enumerate(["a1", "a2", "a1", "a3"]):
        rig.qr(app, now=i * 10**6)
        s = rig.through_uniqueness(app, now=i * 10**6 + 3600)
        if handle == "a3":
            with _Raises(Reason.CAP_REACHED):
                rig.attest(app, s, "twitter", handle, now=i * 10**6 + 3600)
        else:
            rig.attest(app, s, "twitter", handle, now=i * 10**6 + 3600)
        app.end_round()
    rec = next(iter(rig.registry.records.values()))
    assert rec.per_platform_counts == {"twitter": 2}
    upserts = [e[2]["upsert"] for e in rig.events if e[1] == "session" and "upsert" in e[2]]
    assert upserts == [Upsert.INSERTED.value, Upsert.INSERTED.value, Upsert.OVERWRITTEN.value]


def test_second_person_same_fingerprint_links_to_same_record():
    rig = Rig()
    a, b = rig.app(), rig.app()
    rig.qr(a)
    rig.qr(b)
    rig.through_uniqueness(a, features=b"same")
    s = rig.through_uniqueness(b, features=b"same")
    assert len(rig.registry.records) == 1
    assert s.record_id == "rec-000001"


def test_ink_flow():
    rig = Rig()
    app = rig.app()
    rig.qr(app)
    s = rig.pos.open_session(3600)
    rig.pos.verify_qr(s, app.present_qr(3600), True, 3600)
    ch = rig.pos.issue_challenge(s, 3600)
    rig.pos.check_code(s, app.decode_challenge(ch, rig.pos.device_keys.public), 3600)
    result = rig.pos.capture_uniqueness(s, Ink(), 3600)
    assert result.ink_qr is not None and not result.sybil_flag
    app.end_round()
    rig.qr(app, now=10**6)
    s2 = rig.through_uniqueness(app, now=10**6 + 3600, choice=Ink(presented=result.ink_qr, marked=True))
    assert s2.record_id == s.record_id


def test_ink_mark_without_qr_refused():
    rig = Rig()
    app = rig.app()
    rig.qr(app)
    with _Raises(Reason.INK_QR_MISSING):
        rig.through_uniqueness(app, choice=Ink(presented=None, marked=True))


def test_watchdog_blocks_moved_terminal():
    rig = Rig()
    app = rig.app()
    rig.qr(app)
    assert rig.pos.watchdog(HOME) is Watchdog.OK
    rig.node = "rogue"
    with _Raises(Reason.POS_ALERT):
        rig.pos.open_session(3600)
    assert any(e[1] == "pos_alert" for e in rig.events)
    # coming back does not clear the alert; only re-registration does
    rig.node = HOME
    assert rig.pos.watchdog(HOME) is Watchdog.ALERT
    rig.pos.reregister(HOME)
    rig.pos.open_session(3600)


def test_not_logged_in():
    rig = Rig()
    app = rig.app()
    with _Raises(Reason.NOT_LOGGED_IN):
        app.prepare_attestation("twitter", "ghost", "g", 1, rig.pos.group_keys.public)


def test_signer_transcript_has_no_handle_bytes():
    rig = Rig()
    app = rig.app()
    rig.qr(app)
    s = rig.through_uniqueness(app)
    handle = "very-distinctive-handle"
    token = rig.attest(app, s, "twitter", handle)
    canonical = wire.canonical_bytes(token.message)
    commitment = app.commitment("twitter", handle)
    for entry in rig.pos.transcript:
        assert handle.encode() not in entry
        assert canonical not in entry
        assert commitment.encode() not in entry
        assert token.group_sig != entry


def test_commitment_is_stable_and_keyed():
    rig = Rig()
    a, b = rig.app(), rig.app()
    assert a.commitment("tw", "x") == a.commitment("tw", "x")
    assert a.commitment("tw", "x") != b.commitment("tw", "x")
    assert a.commitment("tw", "x") != a.commitment("tw", "y")
