"""Deterministic discrete-event core: clock, processes, ledger, channels."""
from __future__ import annotations

import hashlib
import heapq
import json
import random
from collections.abc import Callable, Generator, Iterable
from dataclasses import dataclass
from typing import Any

Process = Generator[int, None, Any]

DAY = 86400
HOUR = 3600


def rng_stream(seed: int, label: str) -> random.Random:
    """Independent generator for ``label``; adding labels never shifts others."""
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return random.Random(int.from_bytes(digest[:16], "big"))


def derive_int(seed: int, label: str, bits: int = 63) -> int:
    digest = hashlib.sha256(f"{seed}/{label}/int".encode()).digest()
    return int.from_bytes(digest, "big") >> (256 - bits)


class SimClock:
    def __init__(self) -> None:
        self._now = 0

    @property
    def now(self) -> int:
        return self._now

    def advance_to(self, t: int) -> None:
        if t < self._now:
            raise ValueError(f"clock cannot go back from {self._now} to {t}")
        self._now = t


class EventLoop:
    """Min-heap of ``(time, seq)`` keyed callbacks.

    Processes are generators that yield a non-negative integer delay in
    seconds; ties are broken by scheduling order, which keeps runs
    reproducible.
    """

    def __init__(self) -> None:
        self.clock = SimClock()
        self._queue: list[tuple[int, int, Callable, tuple]] = []
        self._seq = 0
        self.steps = 0

    @property
    def now(self) -> int:
        return self.clock.now

    def call_at(self, t: int, fn: Callable, *args) -> None:
        if t < self.now:
            raise ValueError("cannot schedule in the past")
        heapq.heappush(self._queue, (t, self._seq, fn, args))
        self._seq += 1

    def call_later(self, delay: int, fn: Callable, *args) -> None:
        self.call_at(self.now + delay, fn, *args)

    def spawn(self, process: Process, delay: int = 0) -> None:
        self.call_later(delay, self._resume, process)

    def _resume(self, process: Process) -> None:
        try:
            delay = next(process)
        except StopIteration:
            return
        if not isinstance(delay, int) or delay < 0:
            raise TypeError(f"process yielded {delay!r}; expected a non-negative int delay")
        self.call_later(delay, self._resume, process)

    def run(self, until: int | None = None, after_step: Callable[[], None] | None = None) -> None:
        while self._queue:
            t, _, fn, args = self._queue[0]
            if until is not None and t > until:
                break
            heapq.heappop(self._queue)
            self.clock.advance_to(t)
            fn(*args)
            self.steps += 1
            if after_step is not None:
                after_step()

    def pending(self) -> int:
        return len(self._queue)


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class LedgerEvent:
    seq: int
    t: int
    actor: str
    kind: str
    digest: str
    data: dict

    def to_json(self) -> dict:
        return {"seq": self.seq, "t": self.t, "actor": self.actor, "kind": self.kind,
                "digest": self.digest, "data": self.data}


class RunLedger:
    """Append-only event record; serialises to newline-delimited JSON."""

    def __init__(self) -> None:
        self.events: list[LedgerEvent] = []

    def append(self, t: int, actor: str, kind: str, data: dict | None = None, payload: bytes | None = None) -> LedgerEvent:
        data = dict(data or {})
        if self.events and t < self.events[-1].t:
            raise ValueError("ledger timestamps must be non-decreasing")
        raw = payload if payload else canonical_json(data).encode()
        event = LedgerEvent(len(self.events), t, actor, kind, hashlib.sha256(raw).hexdigest()[:32], data)
        self.events.append(event)
        return event

    def of_kind(self, *kinds: str) -> list[LedgerEvent]:
        return [e for e in self.events if e.kind in kinds]

    def to_ndjson(self) -> str:
        return "".join(canonical_json(e.to_json()) + "\n" for e in self.events)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ndjson().encode()).hexdigest()

    @classmethod
    def from_ndjson(cls, lines: Iterable[str]) -> RunLedger:
        ledger = cls()
        for line in lines:
            if line.strip():
                obj = json.loads(line)
                ledger.events.append(LedgerEvent(obj["seq"], obj["t"], obj["actor"], obj["kind"],
                                                 obj["digest"], obj["data"]))
        return ledger


class ChannelUnavailable(Exception):
    pass


class Channels:
    """NFC (co-location only), mail (delay and redirect) and network (fixed latency).

    ``locate`` maps an actor name to the location node it occupies right now.
    """

    def __init__(self, loop: EventLoop, ledger: RunLedger, locate: Callable[[str], str], net_latency: int = 1):
        self.loop = loop
        self.ledger = ledger
        self.locate = locate
        self.net_latency = net_latency

    def nfc(self, src: str, dst: str, payload: bytes, msg: str, session: str | None = None) -> None:
        src_node, dst_node = self.locate(src), self.locate(dst)
        data = {"src": src, "dst": dst, "src_node": src_node, "dst_node": dst_node, "msg": msg}
        if session is not None:
            data["session"] = session
        if src_node != dst_node:
            self.ledger.append(self.loop.now, src, "nfc_unavailable", data, payload)
            raise ChannelUnavailable(f"{src}@{src_node} cannot reach {dst}@{dst_node}")
        self.ledger.append(self.loop.now, src, "nfc", data, payload)

    def net(self, src: str, dst: str, payload: bytes, msg: str) -> int:
        self.ledger.append(self.loop.now, src, "net", {"src": src, "dst": dst, "msg": msg}, payload)
        return self.net_latency

    def mail_deliver(self, item: Any, delay: int, target: str, redirect_target: str | None = None,
                     payload: bytes = b"", on_arrival: Callable[[Any, str], None] | None = None) -> int:
        """Post ``item``; it lands at ``redirect_target`` (if any) else ``target`` after ``delay``.

        Returns the arrival time.
        """
        destination = redirect_target or target
        arrival = self.loop.now + delay
        self.ledger.append(self.loop.now, "mail", "mail_sent",
                           {"target": target, "destination": destination, "arrival": arrival}, payload)

        def _arrive() -> None:
            self.ledger.append(self.loop.now, "mail", "mail_delivered",
                               {"target": target, "destination": destination}, payload)
            if on_arrival is not None:
                on_arrival(item, destination)

        self.loop.call_at(arrival, _arrive)
        return arrival
