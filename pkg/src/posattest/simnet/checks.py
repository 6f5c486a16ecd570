"""Post-run audits over a world and its ledger, used by ``run --check``."""
from __future__ import annotations

from collections import defaultdict

from ..protocol import SessionState
from ..verifier import Verdict, verify_token
from .world import World

_REQUIRED_STATES = (SessionState.QR_OK.value, SessionState.SENTIENCE_OK.value, SessionState.UNIQUENESS_OK.value)


def ledger_problems(world: World) -> list[str]:
    out: list[str] = []
    events = world.ledger.events

    last = 0
    for e in events:
        if e.t < last:
            out.append(f"event {e.seq}: time {e.t} before {last}")
        last = e.t

    for e in world.ledger.of_kind("nfc"):
        if e.data["src_node"] != e.data["dst_node"]:
            out.append(f"event {e.seq}: nfc between {e.data['src_node']} and {e.data['dst_node']}")

    states: dict[str, set[str]] = defaultdict(set)
    announces: dict[tuple[str, str], tuple[str, int]] = {}
    nonces: dict[str, int] = {}
    for e in world.ledger.of_kind("session", "announce"):
        sid = e.data["session"]
        if e.kind == "announce":
            announces[(sid, e.data["platform"])] = (e.data["location_label"], e.data["timestamp"])
            continue
        states[sid].add(e.data["state"])
        digest = e.data.get("nonce_digest")
        if digest is not None:
            if digest in nonces:
                out.append(f"event {e.seq}: challenge nonce reused from event {nonces[digest]}")
            nonces[digest] = e.seq

    publics = world.group_publics()
    for tok in world.tokens:
        missing = [s for s in _REQUIRED_STATES if s not in states[tok.session]]
        if missing:
            out.append(f"token in session {tok.session} issued without {', '.join(missing)}")
        announced = announces.get((tok.session, tok.platform))
        if announced != (tok.location_label, tok.timestamp):
            out.append(f"token in session {tok.session} does not match the announced label/time")
        verdict = verify_token(tok.token, publics, world.now)
        if verdict.status is not Verdict.ACCEPT:
            out.append(f"token in session {tok.session} rejected: {verdict.reason.value}")
    return out


def registry_problems(world: World) -> list[str]:
    out = list(world.invariant_violations)
    for problem in world.registry.violations():
        if problem not in out:
            out.append(problem)
    dump = "\n".join(world.registry.dump_lines())
    for tok in world.tokens:
        # handles are only ever stored as commitments
        if f'"{tok.handle}"' in dump:
            out.append(f"registry stores plaintext handle {tok.handle!r}")
            break
    return out


def audit(world: World) -> list[str]:
    return ledger_problems(world) + registry_problems(world)
