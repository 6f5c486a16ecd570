"""Reader-side checks on published attestation tokens.

A reader holds the group public keys, sees token strings next to posts,
and wants to keep only accounts whose attestation verifies and is recent
enough.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass

from . import crypto, wire
from .crypto import PublicKey
from .wire import CanonicalAttestationMessage


class Verdict(enum.Enum):
    ACCEPT = "accept"
    REJECT = "reject"


class RejectReason(enum.Enum):
    MALFORMED = "Malformed"
    BAD_SIGNATURE = "BadSignature"
    FUTURE_TIMESTAMP = "FutureTimestamp"


@dataclass(frozen=True)
class VerifyResult:
    status: Verdict
    message: CanonicalAttestationMessage | None = None
    reason: RejectReason | None = None

    @property
    def accepted(self) -> bool:
        return self.status is Verdict.ACCEPT


@dataclass(frozen=True)
class FeedEntry:
    token: str
    message: CanonicalAttestationMessage
    age_seconds: int


GroupKeys = PublicKey | Mapping[str, PublicKey]


def _key_for(keys: GroupKeys, label: str) -> PublicKey | None:
    if isinstance(keys, PublicKey):
        return keys
    return keys.get(label)


def verify_token(token: str, group_public: GroupKeys, now: int) -> VerifyResult:
    """Accept iff the token parses, its signature checks out, and it is not from the future.

    ``group_public`` is a single key or a mapping from location label to key.
    """
    try:
        msg, raw, sig = wire.parse_token(token.strip())
    except (wire.MalformedToken, ValueError):
        return VerifyResult(Verdict.REJECT, reason=RejectReason.MALFORMED)
    key = _key_for(group_public, msg.location_label)
    if key is None or not crypto.verify(key, raw, sig):
        return VerifyResult(Verdict.REJECT, msg, RejectReason.BAD_SIGNATURE)
    if msg.timestamp > now:
        return VerifyResult(Verdict.REJECT, msg, RejectReason.FUTURE_TIMESTAMP)
    return VerifyResult(Verdict.ACCEPT, msg)


def filter_feed(tokens: Iterable[str], group_public: GroupKeys, now: int,
                max_age_seconds: float = math.inf) -> list[FeedEntry]:
    """Verified tokens no older than ``max_age_seconds``, in input order.

    When an account shows up several times only its newest attestation is
    kept, at the position where that newest one appeared.
    """
    if not max_age_seconds > 0:
        raise ValueError("max_age_seconds must be positive")
    accepted: list[tuple[str, CanonicalAttestationMessage]] = []
    newest: dict[tuple[str, str], int] = {}
    for token in tokens:
        result = verify_token(token, group_public, now)
        if not result.accepted:
            continue
        msg = result.message
        key = (msg.platform, msg.handle)
        idx = len(accepted)
        accepted.append((token, msg))
        if key not in newest or msg.timestamp >= accepted[newest[key]][1].timestamp:
            newest[key] = idx
    keep = set(newest.values())
    out = []
    for idx, (token, msg) in enumerate(accepted):
        age = now - msg.timestamp
        if idx in keep and age <= max_age_seconds:
            out.append(FeedEntry(token, msg, age))
    return out


CSV_HEADER = ["status", "reason", "platform", "handle", "location_label", "age_seconds"]


def report_rows(tokens: Iterable[str], group_public: GroupKeys, now: int,
                max_age_seconds: float = math.inf) -> list[list[str]]:
    """One CSV row per input token; tokens past ``max_age_seconds`` are marked ``stale``."""
    rows = []
    for token in tokens:
        if not token.strip():
            continue
        result = verify_token(token, group_public, now)
        msg = result.message
        status = result.status.value
        reason = result.reason.value if result.reason else ""
        age = "" if msg is None else str(now - msg.timestamp)
        if result.accepted and now - msg.timestamp > max_age_seconds:
            status, reason = "stale", "TooOld"
        rows.append([status, reason,
                     msg.platform if msg else "", msg.handle if msg else "",
                     msg.location_label if msg else "", age])
    return rows


def report_csv(tokens: Iterable[str], group_public: GroupKeys, now: int,
               max_age_seconds: float = math.inf) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(report_rows(tokens, group_public, now, max_age_seconds))
    return buf.getvalue()
