"""Backend datastore: devices, user records, address caps, account caps.

A single :class:`Registry` owns all state. Callers mutate it only through
its methods, which the simulation invokes from one event loop, so there is
exactly one writer and no locking.
"""
from __future__ import annotations

import csv
import enum
import json
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from .crypto import INK, BiometricId

DEFAULT_ADDRESS_CAP = 4
ACCOUNTS_PER_PLATFORM = 2


class RegistryError(Exception):
    pass


class DuplicateDevice(RegistryError):
    pass


class UnknownDevice(RegistryError):
    pass


class UnknownRecord(RegistryError):
    pass


class CapReached(RegistryError):
    pass


class AddressCheck(enum.Enum):
    ALLOWED = "allowed"
    AT_CAP = "at_cap"


class Lookup(enum.Enum):
    NEW = "new"
    EXISTING = "existing"


class Upsert(enum.Enum):
    INSERTED = "inserted"
    OVERWRITTEN = "overwritten"


@dataclass
class Attestation:
    platform: str
    commitment: str
    location_label: str
    timestamp: int


@dataclass
class UserRecord:
    record_id: str
    biometric: BiometricId
    address: str
    device_uuid: uuid.UUID
    per_platform_counts: dict[str, int] = field(default_factory=dict)
    attestations: list[Attestation] = field(default_factory=list)

    def find(self, platform: str, commitment: str) -> Attestation | None:
        for att in self.attestations:
            if att.platform == platform and att.commitment == commitment:
                return att
        return None

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "biometric": {"kind": self.biometric.kind, "value": self.biometric.value},
            "address": self.address,
            "device_uuid": str(self.device_uuid),
            "per_platform_counts": dict(sorted(self.per_platform_counts.items())),
            "attestations": [
                {
                    "platform": a.platform,
                    "commitment": a.commitment,
                    "location_label": a.location_label,
                    "timestamp": a.timestamp,
                }
                for a in self.attestations
            ],
        }


@dataclass
class AddressCapTable:
    default_cap: int = DEFAULT_ADDRESS_CAP
    overrides: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.default_cap < 1:
            raise ValueError("default cap must be at least 1")
        for address, cap in self.overrides.items():
            if cap < 1:
                raise ValueError(f"cap for {address!r} must be at least 1")

    def cap(self, address: str) -> int:
        return self.overrides.get(address, self.default_cap)

    @classmethod
    def from_csv(cls, path: str | Path, default_cap: int = DEFAULT_ADDRESS_CAP) -> AddressCapTable:
        """Load census overrides from an ``address,cap`` CSV."""
        overrides: dict[str, int] = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                overrides[row["address"]] = int(row["cap"])
        return cls(default_cap, overrides)


class Registry:
    def __init__(self, caps: AddressCapTable | None = None, accounts_per_platform: int = ACCOUNTS_PER_PLATFORM):
        self.caps = caps or AddressCapTable()
        self.accounts_per_platform = accounts_per_platform
        self.devices: dict[uuid.UUID, object] = {}
        self.records: dict[str, UserRecord] = {}
        self._by_biometric: dict[str, str] = {}
        # address -> occupant keys; a key is a record id once the device is bound
        self._occupants: dict[str, list[str]] = {}
        self._device_record: dict[uuid.UUID, str] = {}
        self._ink_serial = 0
        # bumped on every mutation so observers can skip unchanged states
        self.version = 0

    # -- devices ---------------------------------------------------------

    def register_device(self, device_uuid: uuid.UUID, public_key=None) -> None:
        if device_uuid in self.devices:
            raise DuplicateDevice(str(device_uuid))
        self.devices[device_uuid] = public_key

    def device_key(self, device_uuid: uuid.UUID):
        if device_uuid not in self.devices:
            raise UnknownDevice(str(device_uuid))
        return self.devices[device_uuid]

    # -- addresses -------------------------------------------------------

    def occupant_key(self, device_uuid: uuid.UUID) -> str:
        return self._device_record.get(device_uuid, f"device:{device_uuid}")

    def occupants(self, address: str) -> list[str]:
        return list(self._occupants.get(address, []))

    def check_address_cap(self, address: str, occupant: str | None = None) -> AddressCheck:
        """Allowed iff ``occupant`` already lives there or there is room."""
        current = self._occupants.get(address, [])
        if occupant is not None and occupant in current:
            return AddressCheck.ALLOWED
        if len(current) < self.caps.cap(address):
            return AddressCheck.ALLOWED
        return AddressCheck.AT_CAP

    def admit_to_address(self, address: str, occupant: str) -> None:
        if self.check_address_cap(address, occupant) is AddressCheck.AT_CAP:
            raise CapReached(f"address {address!r} at cap")
        current = self._occupants.setdefault(address, [])
        if occupant not in current:
            current.append(occupant)
            self.version += 1

    # -- biometrics ------------------------------------------------------

    def issue_ink_id(self) -> BiometricId:
        self._ink_serial += 1
        return BiometricId(INK, f"ink-{self._ink_serial:08d}")

    def find_biometric(self, biometric: BiometricId) -> UserRecord | None:
        rid = self._by_biometric.get(biometric.key)
        return self.records[rid] if rid is not None else None

    def record_biometric(
        self, biometric: BiometricId, address: str, device_uuid: uuid.UUID
    ) -> tuple[Lookup, UserRecord]:
        """Link a biometric to its record, creating one on first sight.

        The verifying device is bound to the record and the record must hold
        a slot at ``address``: a provisional device slot is converted, else a
        fresh slot is taken, which raises :class:`CapReached` when full.
        """
        existing = self.find_biometric(biometric)
        rid = existing.record_id if existing else f"rec-{len(self.records) + 1:06d}"
        provisional = self.occupant_key(device_uuid)
        current = self._occupants.get(address, [])
        if (
            rid not in current
            and not (provisional.startswith("device:") and provisional in current)
            and len(current) >= self.caps.cap(address)
        ):
            raise CapReached(f"address {address!r} at cap")
        if existing is None:
            record = UserRecord(rid, biometric, address, device_uuid)
            self.records[rid] = record
            self._by_biometric[biometric.key] = rid
        else:
            record = existing
        self._bind_device(device_uuid, rid)
        self.admit_to_address(address, rid)
        self.version += 1
        return (Lookup.EXISTING if existing else Lookup.NEW), record

    def _bind_device(self, device_uuid: uuid.UUID, record_id: str) -> None:
        old = self.occupant_key(device_uuid)
        self._device_record[device_uuid] = record_id
        if not old.startswith("device:"):
            return
        for current in self._occupants.values():
            if old in current:
                idx = current.index(old)
                if record_id in current:
                    del current[idx]
                else:
                    current[idx] = record_id

    # -- accounts --------------------------------------------------------

    def record(self, record_id: str) -> UserRecord:
        try:
            return self.records[record_id]
        except KeyError:
            raise UnknownRecord(record_id) from None

    def try_increment_platform(self, record_id: str, platform: str) -> int:
        rec = self.record(record_id)
        count = rec.per_platform_counts.get(platform, 0)
        if count >= self.accounts_per_platform:
            raise CapReached(f"{record_id} already has {count} {platform} accounts")
        rec.per_platform_counts[platform] = count + 1
        self.version += 1
        return count + 1

    def upsert_attestation(
        self, record_id: str, platform: str, commitment: str, location_label: str, timestamp: int
    ) -> Upsert:
        rec = self.record(record_id)
        existing = rec.find(platform, commitment)
        self.version += 1
        if existing is not None:
            existing.location_label = location_label
            existing.timestamp = max(existing.timestamp, timestamp)
            return Upsert.OVERWRITTEN
        rec.attestations.append(Attestation(platform, commitment, location_label, timestamp))
        return Upsert.INSERTED

    def attest_account(
        self, record_id: str, platform: str, commitment: str, location_label: str, timestamp: int
    ) -> Upsert:
        """Re-verification overwrites; a new account must fit under the cap."""
        if self.record(record_id).find(platform, commitment) is None:
            self.try_increment_platform(record_id, platform)
        return self.upsert_attestation(record_id, platform, commitment, location_label, timestamp)

    # -- inspection ------------------------------------------------------

    def attested_accounts(self) -> int:
        return sum(len(r.attestations) for r in self.records.values())

    def violations(self) -> list[str]:
        out = []
        for rec in self.records.values():
            for platform, count in rec.per_platform_counts.items():
                if count > self.accounts_per_platform:
                    out.append(f"{rec.record_id}: {count} accounts on {platform}")
                listed = sum(1 for a in rec.attestations if a.platform == platform)
                if listed != count:
                    out.append(f"{rec.record_id}: count {count} but {listed} attestations on {platform}")
        for address, current in self._occupants.items():
            if len(current) > self.caps.cap(address):
                out.append(f"address {address!r}: {len(current)} users over cap {self.caps.cap(address)}")
        platforms = {a.platform for r in self.records.values() for a in r.attestations}
        bound = self.accounts_per_platform * len(platforms) * len(self._by_biometric)
        if self.attested_accounts() > bound:
            out.append(f"{self.attested_accounts()} attested accounts exceed bound {bound}")
        return out

    def dump_lines(self) -> list[str]:
        return [json.dumps(r.to_json(), sort_keys=True) for r in self.records.values()]

    def dump(self, path: str | Path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.dump_lines()))
