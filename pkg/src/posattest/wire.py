"""Canonical byte encodings for protocol messages.

Every field is written as a 4-byte big-endian length followed by the raw
field bytes, in declared order, behind a short type tag. Signatures are
always taken over these bytes and never over a text rendering.
"""
from __future__ import annotations

import base64
import binascii
import uuid
from dataclasses import dataclass, replace

TOKEN_PREFIX = "ghost1."

QR_TAG = b"PAQR\x01"
QR_BODY_TAG = b"PAQB\x01"
ATTEST_TAG = b"PAAT\x01"

NONCE_BYTES = 32


class MalformedQr(ValueError):
    pass


class MalformedToken(ValueError):
    pass


def pack_fields(tag: bytes, *fields: bytes) -> bytes:
    out = bytearray(tag)
    for f in fields:
        out += len(f).to_bytes(4, "big")
        out += f
    return bytes(out)


def unpack_fields(data: bytes, tag: bytes, count: int) -> list[bytes]:
    """Inverse of :func:`pack_fields`; raises ``ValueError`` on any mismatch."""
    if not data.startswith(tag):
        raise ValueError("bad tag")
    pos, fields = len(tag), []
    for _ in range(count):
        if pos + 4 > len(data):
            raise ValueError("truncated length")
        size = int.from_bytes(data[pos:pos + 4], "big")
        pos += 4
        if pos + size > len(data):
            raise ValueError("truncated field")
        fields.append(data[pos:pos + size])
        pos += size
    if pos != len(data):
        raise ValueError("trailing bytes")
    return fields


def u64(value: int) -> bytes:
    return value.to_bytes(8, "big")


@dataclass(frozen=True)
class QrMailProof:
    address: str
    device_uuid: uuid.UUID
    nonce: bytes
    issue_time: int
    validity_window: int
    mail_sig: bytes = b""

    @property
    def expires_at(self) -> int:
        return self.issue_time + self.validity_window

    def signed_bytes(self) -> bytes:
        """The tuple the mail server signs: everything except the signature."""
        return pack_fields(
            QR_BODY_TAG,
            self.address.encode("utf-8"),
            self.device_uuid.bytes,
            self.nonce,
            u64(self.issue_time),
            u64(self.validity_window),
        )

    def with_signature(self, sig: bytes) -> QrMailProof:
        return replace(self, mail_sig=sig)


def encode_qr(proof: QrMailProof) -> bytes:
    return pack_fields(
        QR_TAG,
        proof.address.encode("utf-8"),
        proof.device_uuid.bytes,
        proof.nonce,
        u64(proof.issue_time),
        u64(proof.validity_window),
        proof.mail_sig,
    )


def decode_qr(data: bytes) -> QrMailProof:
    try:
        address, dev, nonce, issued, window, sig = unpack_fields(data, QR_TAG, 6)
        address_text = address.decode("utf-8")
    except ValueError as exc:
        raise MalformedQr(str(exc)) from None
    if len(dev) != 16 or len(nonce) != NONCE_BYTES or len(issued) != 8 or len(window) != 8:
        raise MalformedQr("field width")
    validity = int.from_bytes(window, "big")
    if validity <= 0:
        raise MalformedQr("validity window must be positive")
    return QrMailProof(
        address=address_text,
        device_uuid=uuid.UUID(bytes=dev),
        nonce=nonce,
        issue_time=int.from_bytes(issued, "big"),
        validity_window=validity,
        mail_sig=sig,
    )


@dataclass(frozen=True)
class CanonicalAttestationMessage:
    platform: str
    handle: str
    location_label: str
    timestamp: int


def canonical_bytes(msg: CanonicalAttestationMessage) -> bytes:
    for name in ("platform", "handle", "location_label"):
        if not getattr(msg, name):
            raise ValueError(f"{name} must be non-empty")
    if msg.timestamp < 0:
        raise ValueError("timestamp must be non-negative")
    return pack_fields(
        ATTEST_TAG,
        msg.platform.encode("utf-8"),
        msg.handle.encode("utf-8"),
        msg.location_label.encode("utf-8"),
        u64(msg.timestamp),
    )


def parse_canonical(data: bytes) -> CanonicalAttestationMessage:
    platform, handle, label, ts = unpack_fields(data, ATTEST_TAG, 4)
    if len(ts) != 8:
        raise ValueError("timestamp width")
    msg = CanonicalAttestationMessage(
        platform.decode("utf-8"), handle.decode("utf-8"), label.decode("utf-8"), int.from_bytes(ts, "big")
    )
    if canonical_bytes(msg) != data:
        raise ValueError("non-canonical encoding")
    return msg


def format_token(msg: CanonicalAttestationMessage, signature: bytes) -> str:
    body = base64.urlsafe_b64encode(canonical_bytes(msg)).rstrip(b"=").decode("ascii")
    return f"{TOKEN_PREFIX}{body}.{signature.hex()}"


def parse_token(token: str) -> tuple[CanonicalAttestationMessage, bytes, bytes]:
    """Split a published token into ``(message, canonical bytes, signature)``."""
    token = token.strip()
    if not token.startswith(TOKEN_PREFIX):
        raise MalformedToken("missing prefix")
    parts = token[len(TOKEN_PREFIX):].split(".")
    if len(parts) != 2 or not parts[0] or not parts[1]:
        raise MalformedToken("expected body.signature")
    body, sig_hex = parts
    if sig_hex != sig_hex.lower():
        raise MalformedToken("signature must be lowercase hex")
    try:
        raw = base64.urlsafe_b64decode(body + "=" * (-len(body) % 4))
        sig = bytes.fromhex(sig_hex)
        msg = parse_canonical(raw)
    except (ValueError, binascii.Error) as exc:
        raise MalformedToken(str(exc)) from None
    if base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii") != body:
        raise MalformedToken("non-canonical base64")
    return msg, raw, sig
