"""Agreement among peer verifiers with and without a trusted anchor.

``n`` peers each observe whether a user passed a human check and must agree
on the verdict. Every peer broadcasts its vote once; a peer decides after
hearing a quorum of ``n - f`` votes (its own included) and calls the user
valid only if every vote in that quorum says so. That rule is safe against a
silent faulty peer but not against one that tells some peers "valid" and
others "invalid": whichever honest peers happen to hear the bad vote early
reject a user the rest accept.

With an anchor, the anchor's vote is final and every honest peer adopts it.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .simnet.engine import EventLoop, rng_stream

VALID = "valid"
INVALID = "invalid"


@dataclass(frozen=True)
class QuorumConfig:
    n: int
    byzantine: frozenset[int] = frozenset()
    budget_s: int = 60
    seed: int = 0
    anchor: int | None = None
    max_latency_s: int = 10
    truth: str = VALID

    def __post_init__(self):
        object.__setattr__(self, "byzantine", frozenset(self.byzantine))
        if self.n < 2:
            raise ValueError("need at least two participants")
        if not self.byzantine <= set(range(self.n)):
            raise ValueError("byzantine ids must be participants")
        if len(self.byzantine) >= self.n:
            raise ValueError("at least one participant must be honest")
        if self.anchor is not None:
            if not 0 <= self.anchor < self.n:
                raise ValueError("anchor must be a participant")
            if self.anchor in self.byzantine:
                raise ValueError("the anchor is honest by assumption")
        if self.budget_s < 0 or self.max_latency_s < 1:
            raise ValueError("budget must be non-negative and latency positive")
        if self.truth not in (VALID, INVALID):
            raise ValueError(self.truth)

    @property
    def honest(self) -> list[int]:
        return [i for i in range(self.n) if i not in self.byzantine]

    @property
    def faults_tolerated(self) -> int:
        return max(1, (self.n - 1) // 3)

    @property
    def quorum(self) -> int:
        return self.n - self.faults_tolerated


@dataclass(frozen=True)
class RoundOutcome:
    agreement: bool
    value: str | None
    decisions: dict[int, str | None] = field(default_factory=dict)
    seed: int = 0

    def describe(self) -> str:
        return f"Agreement({self.value})" if self.agreement else "NoAgreement"


def decide(votes: list[str]) -> str:
    return VALID if all(v == VALID for v in votes) else INVALID


def equivocation_split(config: QuorumConfig, sender: int) -> dict[int, str]:
    """Which vote a faulty ``sender`` hands each peer this run."""
    rng = rng_stream(config.seed, f"trilemma/split/{sender}")
    peers = [i for i in range(config.n) if i != sender]
    # split into two non-empty groups when possible
    k = rng.randint(1, len(peers) - 1) if len(peers) > 1 else 1
    told_invalid = set(rng.sample(peers, k))
    return {p: (INVALID if p in told_invalid else VALID) for p in peers}


def _outcome(config: QuorumConfig, decisions: dict[int, str | None]) -> RoundOutcome:
    values = {decisions[i] for i in config.honest}
    if None not in values and len(values) == 1:
        return RoundOutcome(True, values.pop(), decisions, config.seed)
    return RoundOutcome(False, None, decisions, config.seed)


def run_decentralized_round(config: QuorumConfig) -> RoundOutcome:
    """One vote exchange under seeded message delays, stopped at ``budget_s``."""
    loop = EventLoop()
    latency = rng_stream(config.seed, "trilemma/latency")
    inbox: dict[int, list[str]] = {i: [] for i in range(config.n)}
    decisions: dict[int, str | None] = {i: None for i in range(config.n)}

    def deliver(receiver: int, sender: int, vote: str) -> None:
        if receiver in config.byzantine or decisions[receiver] is not None:
            return
        if config.anchor is not None:
            if sender == config.anchor:
                decisions[receiver] = vote
            return
        inbox[receiver].append(vote)
        if len(inbox[receiver]) >= config.quorum:
            decisions[receiver] = decide(inbox[receiver])

    for sender in range(config.n):
        if sender in config.byzantine:
            votes = equivocation_split(config, sender)
        else:
            votes = {p: config.truth for p in range(config.n) if p != sender}
            # own vote counts immediately
            loop.call_at(0, deliver, sender, sender, config.truth)
        for receiver in sorted(votes):
            loop.call_at(latency.randint(1, config.max_latency_s), deliver, receiver, sender, votes[receiver])

    loop.run(until=config.budget_s)
    return _outcome(config, decisions)


def sweep(n: int, byzantine=(), seeds: int = 1000, anchor: int | None = None, budget_s: int = 60,
          max_latency_s: int = 10) -> list[RoundOutcome]:
    return [
        run_decentralized_round(QuorumConfig(n, frozenset(byzantine), budget_s, seed, anchor, max_latency_s))
        for seed in range(seeds)
    ]


def no_agreement_fraction(outcomes: list[RoundOutcome]) -> float:
    return sum(1 for o in outcomes if not o.agreement) / len(outcomes) if outcomes else 0.0


def enumerate_schedules(n: int, byzantine=(), truth: str = VALID) -> dict[str, int]:
    """Count outcomes over every delivery order and every equivocation split.

    Delivery to different receivers is independent and a receiver's
    decision depends only on which peers' votes land first, so each
    schedule class is one such choice per honest receiver. Small
    ``n`` only.
    """
    byz = frozenset(byzantine)
    honest = [i for i in range(n) if i not in byz]
    quorum = n - max(1, (n - 1) // 3)
    splits_per_sender = []
    for b in sorted(byz):
        peers = [i for i in range(n) if i != b]
        splits_per_sender.append([
            {p: (INVALID if p in bad else VALID) for p in peers}
            for k in range(len(peers) + 1)
            for bad in itertools.combinations(peers, k)
        ])
    counts = {"agreement": 0, "no_agreement": 0}
    for splits in itertools.product(*splits_per_sender) if byz else [()]:
        told = dict(zip(sorted(byz), splits))
        per_receiver = []
        for r in honest:
            others = [s for s in range(n) if s != r]
            options = []
            for first in itertools.combinations(others, quorum - 1):
                votes = [truth] + [told[s][r] if s in byz else truth for s in first]
                options.append(decide(votes))
            per_receiver.append(options)
        for combo in itertools.product(*per_receiver):
            counts["agreement" if len(set(combo)) == 1 else "no_agreement"] += 1
    return counts
