"""Keyed signatures, Chaum-style blind signatures and salted biometric hashing.

Everything here is RSA full-domain-hash over moduli sized for simulation
speed. Nothing is constant time and nothing should guard real secrets.
All randomness is passed in explicitly so that a scenario seed fixes every
key, nonce and blinding factor.
"""
from __future__ import annotations

import base64
import enum
import hashlib
import math
import random
from dataclasses import dataclass, field

import gmpy2

DEFAULT_BITS = 512
PUBLIC_EXPONENT = 65537


class CryptoError(ValueError):
    pass


class KeyRole(enum.Enum):
    USER_APP = "A"
    MAIL_SERVER = "U"
    POS_DEVICE = "P"
    POS_GROUP = "G"


@dataclass(frozen=True)
class PublicKey:
    role: KeyRole
    n: int
    e: int

    @property
    def width(self) -> int:
        return (self.n.bit_length() + 7) // 8


@dataclass(frozen=True)
class SecretKey:
    role: KeyRole
    p: int
    q: int
    e: int
    d: int = field(repr=False)

    @property
    def n(self) -> int:
        return self.p * self.q


@dataclass(frozen=True)
class Keypair:
    role: KeyRole
    secret: SecretKey
    public: PublicKey


@dataclass(frozen=True)
class BlindingFactor:
    """Per-request randomness; stays with the requester."""

    r: int = field(repr=False)
    n: int = field(repr=False)


@dataclass(frozen=True)
class BiometricId:
    kind: str  # "fingerprint" or "ink"
    value: str
    salt: str = ""

    @property
    def key(self) -> str:
        return f"{self.kind}:{self.value}"


FINGERPRINT = "fingerprint"
INK = "ink"


def public_of(secret: SecretKey) -> PublicKey:
    return PublicKey(secret.role, secret.p * secret.q, secret.e)


def _key_rng(role: KeyRole, seed: int, bits: int) -> random.Random:
    digest = hashlib.sha256(f"keygen/{role.value}/{seed}/{bits}".encode()).digest()
    return random.Random(int.from_bytes(digest, "big"))


def _prime(rng: random.Random, bits: int, e: int) -> int:
    while True:
        # top two bits set so that p*q has exactly 2*bits bits
        candidate = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(candidate))
        if p.bit_length() == bits and math.gcd(e, p - 1) == 1:
            return p


def keypair_from_primes(role: KeyRole, p: int, q: int, e: int = PUBLIC_EXPONENT) -> Keypair:
    """Build a keypair from explicit primes; used for toy-modulus checks."""
    if p == q:
        raise CryptoError("p and q must differ")
    phi = (p - 1) * (q - 1)
    if math.gcd(e, phi) != 1:
        raise CryptoError("public exponent not invertible modulo phi(n)")
    secret = SecretKey(role, p, q, e, pow(e, -1, phi))
    return Keypair(role, secret, public_of(secret))


def keygen(role: KeyRole, seed: int, bits: int = DEFAULT_BITS) -> Keypair:
    """Deterministic RSA keypair for ``(role, seed, bits)``."""
    rng = _key_rng(role, seed, bits)
    half = bits // 2
    p = _prime(rng, half, PUBLIC_EXPONENT)
    q = _prime(rng, bits - half, PUBLIC_EXPONENT)
    while q == p:
        q = _prime(rng, bits - half, PUBLIC_EXPONENT)
    return keypair_from_primes(role, p, q)


def _fdh(message: bytes, pub: PublicKey) -> int:
    # expand past the modulus width so the reduction bias is negligible
    xof = hashlib.shake_256()
    xof.update(b"posattest-fdh\x00")
    xof.update(pub.n.to_bytes(pub.width, "big"))
    xof.update(message)
    return int.from_bytes(xof.digest(pub.width + 16), "big") % pub.n


def message_representative(message: bytes, pub: PublicKey) -> int:
    """The integer in Z_n that a signature over ``message`` is checked against."""
    if not message:
        raise CryptoError("message must be non-empty")
    return _fdh(message, pub)


def _to_bytes(value: int, pub: PublicKey) -> bytes:
    return value.to_bytes(pub.width, "big")


def sign(secret: SecretKey, message: bytes) -> bytes:
    pub = public_of(secret)
    h = message_representative(message, pub)
    return _to_bytes(pow(h, secret.d, pub.n), pub)


def verify(public: PublicKey, message: bytes, sig: bytes) -> bool:
    if not message or len(sig) != public.width:
        return False
    s = int.from_bytes(sig, "big")
    if s >= public.n:
        return False
    return pow(s, public.e, public.n) == _fdh(message, public)


def draw_blinding_factor(pub: PublicKey, rng: random.Random) -> BlindingFactor:
    while True:
        # uniform over the units; any other r would leak a factor of n
        r = rng.randrange(1, pub.n)
        if math.gcd(r, pub.n) == 1:
            return BlindingFactor(r, pub.n)


def blind_representative(h: int, factor: BlindingFactor, pub: PublicKey) -> int:
    return (h * pow(factor.r, pub.e, pub.n)) % pub.n


def blind(message: bytes, group_public: PublicKey, rng: random.Random) -> tuple[bytes, BlindingFactor]:
    """Blind ``message`` for signing under a group key.

    Returns the blinded bytes that go to the signer and the factor the
    requester keeps for :func:`unblind`.
    """
    if group_public.role is not KeyRole.POS_GROUP:
        raise CryptoError(f"blinding requires a group key, got {group_public.role.name}")
    h = message_representative(message, group_public)
    factor = draw_blinding_factor(group_public, rng)
    return _to_bytes(blind_representative(h, factor, group_public), group_public), factor


def sign_blinded(group_secret: SecretKey, blinded: bytes) -> bytes:
    n = group_secret.n
    pub = public_of(group_secret)
    m = int.from_bytes(blinded, "big")
    if len(blinded) != pub.width or m >= n:
        raise CryptoError("blinded message out of range")
    return _to_bytes(pow(m, group_secret.d, n), pub)


def unblind(blind_sig: bytes, factor: BlindingFactor) -> bytes:
    n = factor.n
    width = (n.bit_length() + 7) // 8
    s = (int.from_bytes(blind_sig, "big") * pow(factor.r, -1, n)) % n
    return s.to_bytes(width, "big")


def hash_biometric(features: bytes, salt: bytes) -> BiometricId:
    if not features:
        raise CryptoError("biometric features must be non-empty")
    value = hashlib.sha256(salt + features).hexdigest()
    return BiometricId(FINGERPRINT, value, salt.hex())


# -- opaque key blobs -------------------------------------------------------

def _b64(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


def _pack_ints(tag: bytes, *values: int) -> bytes:
    out = bytearray(tag)
    for v in values:
        raw = v.to_bytes(max(1, (v.bit_length() + 7) // 8), "big")
        out += len(raw).to_bytes(4, "big") + raw
    return bytes(out)


def _unpack_ints(blob: bytes, tag: bytes, count: int) -> list[int]:
    if not blob.startswith(tag):
        raise CryptoError("unrecognised key blob")
    pos, values = len(tag), []
    for _ in range(count):
        if pos + 4 > len(blob):
            raise CryptoError("truncated key blob")
        size = int.from_bytes(blob[pos:pos + 4], "big")
        pos += 4
        if pos + size > len(blob):
            raise CryptoError("truncated key blob")
        values.append(int.from_bytes(blob[pos:pos + size], "big"))
        pos += size
    if pos != len(blob):
        raise CryptoError("trailing bytes in key blob")
    return values


def export_public(pub: PublicKey) -> str:
    return _b64(_pack_ints(b"pk1" + pub.role.value.encode(), pub.n, pub.e))


def _blob_role(raw: bytes) -> KeyRole:
    try:
        return KeyRole(raw[3:4].decode())
    except ValueError:
        raise CryptoError("unrecognised key blob") from None


def import_public(blob: str) -> PublicKey:
    raw = _unb64(blob)
    role = _blob_role(raw)
    n, e = _unpack_ints(raw, b"pk1" + role.value.encode(), 2)
    return PublicKey(role, n, e)


def export_secret(secret: SecretKey) -> str:
    return _b64(_pack_ints(b"sk1" + secret.role.value.encode(), secret.p, secret.q, secret.e, secret.d))


def import_secret(blob: str) -> SecretKey:
    raw = _unb64(blob)
    role = _blob_role(raw)
    p, q, e, d = _unpack_ints(raw, b"sk1" + role.value.encode(), 4)
    return SecretKey(role, p, q, e, d)
