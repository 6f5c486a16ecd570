"""Actor state machines for address verification and in-store attestation.

Four parties take part: the user's phone app, the backend (which also runs
the mail server key), and a POS terminal operated by a store employee. The
actors never touch each other's state; the simulation moves the values they
return between them over the appropriate channel.

Attestation deviates from a literal "POS appends location and time to the
blinded message": a value appended after blinding would not survive
unblinding. The POS therefore announces ``(location_label, timestamp)``
first and the user blinds the complete canonical message. The handle stays
hidden from the POS and the metadata is still covered by the signature.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import random
import uuid
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Union

from . import crypto, wire
from .crypto import BiometricId, Keypair, PublicKey
from .registry import CapReached, Lookup, Registry, UnknownDevice, Upsert
from .wire import CanonicalAttestationMessage, QrMailProof

DEFAULT_QR_VALIDITY_S = 72 * 3600
DEFAULT_VISIT_DEADLINE_S = 2 * 3600
DEFAULT_MAX_RESTARTS = 3
CODE_DIGITS = 6

EventHook = Callable[[str, str, dict, bytes], None]


def _no_event(actor: str, kind: str, data: dict, payload: bytes) -> None:
    pass


class Reason(enum.Enum):
    INTEGRITY = "IntegrityRefusal"
    UNKNOWN_DEVICE = "UnknownDevice"
    ADDRESS_CAP = "RefusedAddressCap"
    BAD_REQUEST = "RefusedBadRequest"
    EXPIRED = "Expired"
    WRONG_DEVICE = "WrongDevice"
    BAD_SIGNATURE = "BadSignature"
    MALFORMED_QR = "MalformedQr"
    DEADLINE = "VisitDeadlinePassed"
    ID_REJECTED = "IdRejected"
    CHANNEL = "ChannelUnavailable"
    BAD_STATE = "BadState"
    TOO_MANY_RESTARTS = "TooManyRestarts"
    INK_QR_MISSING = "InkMarkWithoutQr"
    CAP_REACHED = "CapReached"
    NOT_LOGGED_IN = "NotLoggedIn"
    SECOND_ACCOUNT = "SecondAccountSamePlatformThisSession"
    POS_ALERT = "PosLocationAlert"
    BUDGET = "BudgetExhausted"


class Refusal(Exception):
    """A protocol step refused to proceed; ``reason`` says why."""

    def __init__(self, reason: Reason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail


class SessionState(enum.Enum):
    AWAIT_QR = "AwaitQr"
    QR_OK = "QrOk"
    CHALLENGE_ISSUED = "ChallengeIssued"
    SENTIENCE_OK = "SentienceOk"
    UNIQUENESS_OK = "UniquenessOk"
    ATTESTING = "Attesting"
    DONE = "Done"
    FAILED = "Failed"


_ALLOWED = {
    SessionState.AWAIT_QR: {SessionState.QR_OK},
    SessionState.QR_OK: {SessionState.CHALLENGE_ISSUED},
    SessionState.CHALLENGE_ISSUED: {SessionState.CHALLENGE_ISSUED, SessionState.SENTIENCE_OK},
    SessionState.SENTIENCE_OK: {SessionState.UNIQUENESS_OK},
    SessionState.UNIQUENESS_OK: {SessionState.ATTESTING, SessionState.DONE},
    SessionState.ATTESTING: {SessionState.ATTESTING, SessionState.DONE},
    SessionState.DONE: set(),
    SessionState.FAILED: set(),
}


class Watchdog(enum.Enum):
    OK = "ok"
    ALERT = "alert"


# -- messages -------------------------------------------------------------

@dataclass(frozen=True)
class AddressRequest:
    address: str
    device_uuid: uuid.UUID
    nonce: bytes
    user_sig: bytes

    def signed_bytes(self) -> bytes:
        return address_request_bytes(self.address, self.device_uuid, self.nonce)


def address_request_bytes(address: str, device_uuid: uuid.UUID, nonce: bytes) -> bytes:
    return wire.pack_fields(b"PAAR\x01", address.encode("utf-8"), device_uuid.bytes, nonce)


@dataclass(frozen=True)
class SentienceChallenge:
    nonce: bytes
    pos_sig: bytes
    issued_at: int

    def signed_bytes(self) -> bytes:
        return challenge_bytes(self.nonce, self.issued_at)

    def encode(self) -> bytes:
        return wire.pack_fields(b"PACH\x01", self.nonce, self.pos_sig, wire.u64(self.issued_at))


def challenge_bytes(nonce: bytes, issued_at: int) -> bytes:
    return wire.pack_fields(b"PACB\x01", nonce, wire.u64(issued_at))


def code_from_nonce(nonce: bytes) -> str:
    return f"{int.from_bytes(nonce, 'big') % 10 ** CODE_DIGITS:0{CODE_DIGITS}d}"


@dataclass(frozen=True)
class AttestationToken:
    platform: str
    handle: str
    location_label: str
    timestamp: int
    group_sig: bytes

    @property
    def message(self) -> CanonicalAttestationMessage:
        return CanonicalAttestationMessage(self.platform, self.handle, self.location_label, self.timestamp)

    def verify(self, group_public: PublicKey) -> bool:
        return crypto.verify(group_public, wire.canonical_bytes(self.message), self.group_sig)

    def to_string(self) -> str:
        return wire.format_token(self.message, self.group_sig)


@dataclass(frozen=True)
class Fingerprint:
    features: bytes


@dataclass(frozen=True)
class Ink:
    presented: BiometricId | None = None
    marked: bool = False


UniquenessChoice = Union[Fingerprint, Ink]


@dataclass(frozen=True)
class UniquenessResult:
    biometric: BiometricId
    lookup: Lookup
    record_id: str
    ink_qr: BiometricId | None = None

    @property
    def sybil_flag(self) -> bool:
        return self.lookup is Lookup.EXISTING


# -- user app -------------------------------------------------------------

class UserApp:
    def __init__(self, device_uuid: uuid.UUID, keys: Keypair, rng: random.Random, rooted: bool = False):
        self.device_uuid = device_uuid
        self.keys = keys
        self.rng = rng
        self.rooted = rooted
        self.logins: set[tuple[str, str]] = set()
        self.qr: QrMailProof | None = None
        self.visit_deadline: int | None = None
        self.tokens: dict[tuple[str, str], AttestationToken] = {}
        self._pending: dict[str, tuple[CanonicalAttestationMessage, crypto.BlindingFactor, PublicKey]] = {}
        self._commit_key = hashlib.sha256(b"commit" + crypto.export_secret(keys.secret).encode()).digest()

    def _integrity(self) -> None:
        if self.rooted:
            raise Refusal(Reason.INTEGRITY, "compromised device")

    def login(self, platform: str, handle: str) -> None:
        self.logins.add((platform, handle))

    def request_address_verification(self, address: str) -> AddressRequest:
        self._integrity()
        nonce = self.rng.randbytes(wire.NONCE_BYTES)
        sig = crypto.sign(self.keys.secret, address_request_bytes(address, self.device_uuid, nonce))
        return AddressRequest(address, self.device_uuid, nonce, sig)

    def scan_qr(self, proof: QrMailProof, now: int, mail_public: PublicKey,
                visit_window: int = DEFAULT_VISIT_DEADLINE_S) -> int:
        """Check a mailed QR and start the store-visit countdown; returns the deadline."""
        self._integrity()
        if not crypto.verify(mail_public, proof.signed_bytes(), proof.mail_sig):
            raise Refusal(Reason.BAD_SIGNATURE, "mail server signature")
        if proof.device_uuid != self.device_uuid:
            raise Refusal(Reason.WRONG_DEVICE, "QR was requested by another device")
        if now > proof.expires_at:
            raise Refusal(Reason.EXPIRED, f"scanned at {now}, expired at {proof.expires_at}")
        self.qr = proof
        self.visit_deadline = now + visit_window
        return self.visit_deadline

    def present_qr(self, now: int) -> QrMailProof:
        self._integrity()
        if self.qr is None:
            raise Refusal(Reason.BAD_STATE, "no scanned QR")
        if now > self.visit_deadline:
            raise Refusal(Reason.DEADLINE, f"visit deadline {self.visit_deadline} passed")
        return self.qr

    def decode_challenge(self, challenge: SentienceChallenge, pos_public: PublicKey) -> str:
        self._integrity()
        if not crypto.verify(pos_public, challenge.signed_bytes(), challenge.pos_sig):
            raise Refusal(Reason.BAD_SIGNATURE, "POS challenge signature")
        return code_from_nonce(challenge.nonce)

    def commitment(self, platform: str, handle: str) -> str:
        """Keyed commitment to an account; stable across rounds on this device."""
        data = wire.pack_fields(b"PACM\x01", platform.encode("utf-8"), handle.encode("utf-8"))
        return hmac.new(self._commit_key, data, hashlib.sha256).hexdigest()

    def prepare_attestation(self, platform: str, handle: str, location_label: str, timestamp: int,
                            group_public: PublicKey) -> tuple[bytes, str]:
        self._integrity()
        if (platform, handle) not in self.logins:
            raise Refusal(Reason.NOT_LOGGED_IN, f"{platform}")
        msg = CanonicalAttestationMessage(platform, handle, location_label, timestamp)
        blinded, factor = crypto.blind(wire.canonical_bytes(msg), group_public, self.rng)
        self._pending[platform] = (msg, factor, group_public)
        return blinded, self.commitment(platform, handle)

    def finish_attestation(self, platform: str, blind_sig: bytes) -> AttestationToken:
        msg, factor, group_public = self._pending.pop(platform)
        sig = crypto.unblind(blind_sig, factor)
        token = AttestationToken(msg.platform, msg.handle, msg.location_label, msg.timestamp, sig)
        if not token.verify(group_public):
            raise Refusal(Reason.BAD_SIGNATURE, "unblinded signature does not verify")
        # re-verification replaces the older token for the same account
        self.tokens[(msg.platform, msg.handle)] = token
        return token

    def end_round(self) -> None:
        self.qr = None
        self.visit_deadline = None
        self._pending.clear()


# -- backend --------------------------------------------------------------

class Backend:
    """Registry owner plus the mail server's signing key."""

    def __init__(self, registry: Registry, mail_keys: Keypair, biometric_salt: bytes,
                 qr_validity: int = DEFAULT_QR_VALIDITY_S, on_event: EventHook = _no_event):
        if qr_validity <= 0:
            raise ValueError("QR validity window must be positive")
        self.registry = registry
        self.mail_keys = mail_keys
        self.biometric_salt = biometric_salt
        self.qr_validity = qr_validity
        self.on_event = on_event
        self._staged: dict[tuple[uuid.UUID, str], str] = {}

    @property
    def mail_public(self) -> PublicKey:
        return self.mail_keys.public

    def register_device(self, device_uuid: uuid.UUID, public: PublicKey) -> None:
        self.registry.register_device(device_uuid, public)
        self.on_event("backend", "device_registered", {"device": str(device_uuid)}, device_uuid.bytes)

    def issue_qr(self, request: AddressRequest, now: int) -> QrMailProof:
        try:
            public = self.registry.device_key(request.device_uuid)
        except UnknownDevice:
            raise Refusal(Reason.UNKNOWN_DEVICE, str(request.device_uuid)) from None
        if not crypto.verify(public, request.signed_bytes(), request.user_sig):
            raise Refusal(Reason.BAD_REQUEST, "user signature")
        occupant = self.registry.occupant_key(request.device_uuid)
        try:
            self.registry.admit_to_address(request.address, occupant)
        except CapReached:
            raise Refusal(Reason.ADDRESS_CAP, request.address) from None
        proof = QrMailProof(request.address, request.device_uuid, request.nonce, now, self.qr_validity)
        proof = proof.with_signature(crypto.sign(self.mail_keys.secret, proof.signed_bytes()))
        self.on_event("backend", "qr_issued",
                      {"device": str(proof.device_uuid), "expires_at": proof.expires_at}, wire.encode_qr(proof))
        return proof

    def stage_commitment(self, device_uuid: uuid.UUID, platform: str, commitment: str) -> None:
        self._staged[(device_uuid, platform)] = commitment

    def capture(self, biometric: BiometricId, address: str, device_uuid: uuid.UUID) -> tuple[Lookup, str]:
        try:
            lookup, record = self.registry.record_biometric(biometric, address, device_uuid)
        except CapReached:
            raise Refusal(Reason.ADDRESS_CAP, address) from None
        return lookup, record.record_id

    def authorize_attestation(self, record_id: str, device_uuid: uuid.UUID, platform: str,
                              location_label: str, timestamp: int) -> Upsert:
        commitment = self._staged.pop((device_uuid, platform), None)
        if commitment is None:
            raise Refusal(Reason.BAD_STATE, "no staged account commitment")
        try:
            return self.registry.attest_account(record_id, platform, commitment, location_label, timestamp)
        except CapReached as exc:
            raise Refusal(Reason.CAP_REACHED, str(exc)) from None


# -- POS terminal ---------------------------------------------------------

@dataclass
class PosSession:
    session_id: str
    opened_at: int
    state: SessionState = SessionState.AWAIT_QR
    device_uuid: uuid.UUID | None = None
    address: str | None = None
    record_id: str | None = None
    restarts: int = 0
    failure: Reason | None = None
    attested: list[str] = field(default_factory=list)
    announced: dict[str, tuple[str, int]] = field(default_factory=dict)
    _nonce: bytes | None = field(default=None, repr=False)


class PosTerminal:
    def __init__(self, store_id: str, group_id: str, home_node: str, device_keys: Keypair,
                 group_keys: Keypair, backend: Backend, rng: random.Random, honest_employee: bool = True,
                 locator: Callable[[], str] | None = None, on_event: EventHook = _no_event,
                 max_restarts: int = DEFAULT_MAX_RESTARTS):
        self.store_id = store_id
        self.group_id = group_id
        self.registered_node = home_node
        self.device_keys = device_keys
        self.group_keys = group_keys
        self.backend = backend
        self.rng = rng
        self.honest_employee = honest_employee
        self.locator = locator
        self.on_event = on_event
        self.max_restarts = max_restarts
        self.alerted = False
        self.transcript: list[bytes] = []
        self._sessions = 0

    @property
    def actor(self) -> str:
        return f"pos:{self.store_id}"

    def _log(self, kind: str, data: dict, payload: bytes = b"") -> None:
        self.on_event(self.actor, kind, data, payload)

    def _record(self, payload: bytes) -> bytes:
        self.transcript.append(payload)
        return payload

    # location watchdog

    def watchdog(self, observed_node: str) -> Watchdog:
        if observed_node != self.registered_node:
            if not self.alerted:
                self._log("pos_alert", {"registered": self.registered_node, "observed": observed_node})
            self.alerted = True
        return Watchdog.ALERT if self.alerted else Watchdog.OK

    def reregister(self, node: str) -> None:
        self.registered_node = node
        self.alerted = False
        self._log("pos_reregistered", {"node": node})

    def _guard(self, session: PosSession, *expected: SessionState) -> None:
        if self.locator is not None:
            self.watchdog(self.locator())
        if self.alerted:
            self._fail(session, Reason.POS_ALERT, "terminal moved from its registered location")
        if session.state not in expected:
            self._fail(session, Reason.BAD_STATE, f"in {session.state.value}")

    def _advance(self, session: PosSession, state: SessionState, **data) -> None:
        if state not in _ALLOWED[session.state]:
            raise AssertionError(f"illegal transition {session.state.value} -> {state.value}")
        session.state = state
        self._log("session", {"session": session.session_id, "state": state.value, **data})

    def _fail(self, session: PosSession, reason: Reason, detail: str = ""):
        if session.state is not SessionState.FAILED:
            session.state = SessionState.FAILED
            session.failure = reason
            self._log("session", {"session": session.session_id, "state": SessionState.FAILED.value,
                                  "reason": reason.value})
        raise Refusal(reason, detail)

    # session steps

    def open_session(self, now: int) -> PosSession:
        self._sessions += 1
        session = PosSession(f"{self.store_id}/{self._sessions:05d}", now)
        self._log("session", {"session": session.session_id, "state": session.state.value})
        self._guard(session, SessionState.AWAIT_QR)
        return session

    def employee_id_check(self, id_matches: bool) -> bool:
        """A corrupt employee waves every ID through."""
        return True if not self.honest_employee else id_matches

    def verify_qr(self, session: PosSession, proof: QrMailProof, presented_id_ok: bool, now: int) -> None:
        self._guard(session, SessionState.AWAIT_QR)
        self._record(wire.encode_qr(proof))
        if not crypto.verify(self.backend.mail_public, proof.signed_bytes(), proof.mail_sig):
            self._fail(session, Reason.BAD_SIGNATURE, "mail server signature")
        if now > proof.expires_at:
            self._fail(session, Reason.EXPIRED, f"QR expired at {proof.expires_at}")
        if not presented_id_ok:
            self._fail(session, Reason.ID_REJECTED, "employee rejected ID or proof of residency")
        session.device_uuid = proof.device_uuid
        session.address = proof.address
        self._advance(session, SessionState.QR_OK, device=str(proof.device_uuid), expires_at=proof.expires_at)

    def issue_challenge(self, session: PosSession, now: int) -> SentienceChallenge:
        self._guard(session, SessionState.QR_OK, SessionState.CHALLENGE_ISSUED)
        nonce = self.rng.randbytes(wire.NONCE_BYTES)
        session._nonce = nonce
        sig = crypto.sign(self.device_keys.secret, challenge_bytes(nonce, now))
        challenge = SentienceChallenge(nonce, sig, now)
        self._record(challenge.encode())
        self._advance(session, SessionState.CHALLENGE_ISSUED,
                      nonce_digest=hashlib.sha256(nonce).hexdigest()[:32], restarts=session.restarts)
        return challenge

    def check_code(self, session: PosSession, entered: str, now: int) -> SentienceChallenge | None:
        """``None`` means the code matched; otherwise the fresh challenge to relay."""
        self._guard(session, SessionState.CHALLENGE_ISSUED)
        self._record(entered.encode("utf-8"))
        if hmac.compare_digest(entered.encode("utf-8"), code_from_nonce(session._nonce).encode("ascii")):
            session._nonce = None
            self._advance(session, SessionState.SENTIENCE_OK)
            return None
        session.restarts += 1
        if session.restarts > self.max_restarts:
            self._fail(session, Reason.TOO_MANY_RESTARTS)
        return self.issue_challenge(session, now)

    def capture_uniqueness(self, session: PosSession, choice: UniquenessChoice, now: int) -> UniquenessResult:
        self._guard(session, SessionState.SENTIENCE_OK)
        ink_qr = None
        if isinstance(choice, Fingerprint):
            biometric = crypto.hash_biometric(choice.features, self.backend.biometric_salt)
        elif choice.presented is not None:
            biometric = choice.presented
            if self.backend.registry.find_biometric(biometric) is None:
                self._fail(session, Reason.INK_QR_MISSING, "unknown ink id")
        elif choice.marked:
            self._fail(session, Reason.INK_QR_MISSING, "ink mark present but no QR")
        else:
            biometric = ink_qr = self.backend.registry.issue_ink_id()
        try:
            lookup, record_id = self.backend.capture(biometric, session.address, session.device_uuid)
        except Refusal as exc:
            self._fail(session, exc.reason, exc.detail)
        session.record_id = record_id
        self._advance(session, SessionState.UNIQUENESS_OK, lookup=lookup.value, record=record_id,
                      kind=biometric.kind)
        return UniquenessResult(biometric, lookup, record_id, ink_qr)

    def announce(self, session: PosSession, platform: str, now: int) -> tuple[str, int]:
        self._guard(session, SessionState.UNIQUENESS_OK, SessionState.ATTESTING)
        if platform in session.attested:
            raise Refusal(Reason.SECOND_ACCOUNT, platform)
        session.announced[platform] = (self.group_id, now)
        self._record(wire.pack_fields(b"PAAN\x01", platform.encode(), self.group_id.encode(), wire.u64(now)))
        self._log("announce", {"session": session.session_id, "platform": platform,
                               "location_label": self.group_id, "timestamp": now})
        return self.group_id, now

    def sign_attestation(self, session: PosSession, platform: str, blinded: bytes, now: int) -> bytes:
        self._guard(session, SessionState.UNIQUENESS_OK, SessionState.ATTESTING)
        self._record(blinded)
        if platform in session.attested:
            raise Refusal(Reason.SECOND_ACCOUNT, platform)
        if platform not in session.announced:
            raise Refusal(Reason.BAD_STATE, f"{platform} not announced")
        label, ts = session.announced.pop(platform)
        upsert = self.backend.authorize_attestation(session.record_id, session.device_uuid, platform, label, ts)
        session.attested.append(platform)
        blind_sig = crypto.sign_blinded(self.group_keys.secret, blinded)
        self._record(blind_sig)
        self._advance(session, SessionState.ATTESTING, platform=platform, upsert=upsert.value,
                      location_label=label, timestamp=ts)
        return blind_sig

    def abort(self, session: PosSession, reason: Reason) -> None:
        """Mark a session failed from outside, e.g. when the NFC link drops."""
        try:
            self._fail(session, reason)
        except Refusal:
            pass

    def close(self, session: PosSession) -> None:
        if session.state in (SessionState.UNIQUENESS_OK, SessionState.ATTESTING):
            self._advance(session, SessionState.DONE)
