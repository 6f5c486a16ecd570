"""Scenario documents: schema, defaults, and the top-level run."""
from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

import jsonschema

from ..registry import AddressCapTable
from .engine import DAY, RunLedger
from .world import ADVERSARY, HONEST, World


class ConfigError(ValueError):
    """Scenario failed validation; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path
        self.message = message


_INT = {"type": "integer", "minimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}
_PROB = {"type": "number", "minimum": 0, "maximum": 1}
_IDS = {"type": "array", "items": {"type": "string", "minLength": 1}}

_COST_PARAMS = {"type": "object", "additionalProperties": {"type": ["integer", "null"], "minimum": 0}}

_ATTACK_COMMON = {
    "id": {"type": "string", "minLength": 1},
    "start_s": _INT,
    "stores": _IDS,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["stores", "platforms"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "key_bits": {"type": "integer", "minimum": 256, "maximum": 4096},
        "duration_days": _POS_INT,
        "platforms": {"type": "array", "items": {"type": "string", "minLength": 1}, "minItems": 1,
                      "uniqueItems": True},
        "ink_decay_s": {"type": ["integer", "null"], "minimum": 1},
        "timing": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "qr_validity_s": _POS_INT,
                "visit_deadline_s": _POS_INT,
                "mail_delay_s": {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2},
                "net_latency_s": _INT,
                "travel_s": _INT,
                "step_s": _INT,
                "watchdog_interval_s": _POS_INT,
                "max_restarts": _INT,
            },
        },
        "caps": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "default_address_cap": _POS_INT,
                "accounts_per_platform": _POS_INT,
                "census": {"type": "object", "additionalProperties": _POS_INT},
                "census_csv": {"type": "string"},
            },
        },
        "stores": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "group"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "group": {"type": "string", "minLength": 1},
                    "honest_employee": {"type": "boolean"},
                    "faults": {"type": "array", "items": {"enum": ["skip_sentience"]}},
                },
            },
        },
        "users": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "count": _INT,
                "per_address": _POS_INT,
                "ink_fraction": _PROB,
                "rooted_fraction": _PROB,
                "typo_rate": _PROB,
                "start_window_s": _INT,
                "stores": _IDS,
            },
        },
        "attacks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind", "id"],
                "properties": {"kind": {"enum": ["sybil", "colluder", "mail_redirect", "pos_relocation"]}},
            },
        },
    },
}

ATTACK_SCHEMAS = {
    "sybil": {
        "properties": {
            "technique": {"enum": ["baseline", "credit_card", "address"]},
            "operatives": _INT,
            "in_country": _INT,
            "address_pool": _POS_INT,
            "rounds": _POS_INT,
            "round_interval_s": _POS_INT,
            "budget_usd": {"type": "number", "minimum": 0},
            "fake_id_detect_prob": _PROB,
            "cost_params": _COST_PARAMS,
        },
        "required": ["technique", "operatives"],
    },
    "colluder": {
        "properties": {
            "recruits": _INT,
            "acceptance": _PROB,
            "rounds": _POS_INT,
            "round_interval_s": _POS_INT,
            "budget_usd": {"type": "number", "minimum": 0},
            "cost_params": _COST_PARAMS,
        },
        "required": ["recruits"],
    },
    "mail_redirect": {
        "properties": {
            "attackers": _POS_INT,
            "mode": {"enum": ["delay", "other_device"]},
            "extra_delay_s": _INT,
        },
        "required": ["attackers", "mode"],
    },
    "pos_relocation": {
        "properties": {
            "store": {"type": "string"},
            "at_s": _INT,
            "to_node": {"type": "string", "minLength": 1},
            "attackers": _INT,
            "reregister_at_s": {"type": ["integer", "null"], "minimum": 0},
        },
        "required": ["store", "at_s"],
    },
}
for _kind, _schema in ATTACK_SCHEMAS.items():
    _schema.update(type="object", additionalProperties=False)
    _schema["properties"] = {**_ATTACK_COMMON, "kind": {"const": _kind}, **_schema["properties"]}

DEFAULTS = {
    "name": "unnamed",
    "key_bits": 512,
    "duration_days": 30,
    "ink_decay_s": None,
    "timing": {
        "qr_validity_s": 72 * 3600,
        "visit_deadline_s": 2 * 3600,
        "mail_delay_s": [1 * DAY, 2 * DAY],
        "net_latency_s": 1,
        "travel_s": 1800,
        "step_s": 5,
        "watchdog_interval_s": 600,
        "max_restarts": 3,
    },
    "caps": {"default_address_cap": 4, "accounts_per_platform": 2, "census": {}},
    "users": {"count": 0, "per_address": 1, "ink_fraction": 0.0, "rooted_fraction": 0.0, "typo_rate": 0.0,
              "start_window_s": DAY},
    "attacks": [],
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _path(parts) -> str:
    return "/".join(str(p) for p in parts)


def _check(schema: dict, doc, prefix: list) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    err = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if err is not None:
        raise ConfigError(_path(prefix + list(err.absolute_path)), err.message)


def validate(doc: dict, base_dir: str | Path | None = None) -> dict:
    """Validate ``doc`` and return it with defaults filled in."""
    _check(SCHEMA, doc, [])
    for i, attack in enumerate(doc.get("attacks", [])):
        _check(ATTACK_SCHEMAS[attack["kind"]], attack, ["attacks", i])
    cfg = _merge(DEFAULTS, doc)

    lo, hi = cfg["timing"]["mail_delay_s"]
    if lo > hi:
        raise ConfigError("timing/mail_delay_s", "lower bound exceeds upper bound")
    ids = [s["id"] for s in cfg["stores"]]
    if len(set(ids)) != len(ids):
        raise ConfigError("stores", "store ids must be unique")
    csv_path = cfg["caps"].pop("census_csv", None)
    if csv_path is not None:
        path = Path(csv_path)
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        try:
            table = AddressCapTable.from_csv(path, cfg["caps"]["default_address_cap"])
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError("caps/census_csv", str(exc)) from None
        cfg["caps"]["census"] = {**table.overrides, **cfg["caps"]["census"]}
    for i, store_id in enumerate(cfg["users"].get("stores", [])):
        if store_id not in ids:
            raise ConfigError(f"users/stores/{i}", f"unknown store {store_id!r}")
    seen = set()
    for i, attack in enumerate(cfg["attacks"]):
        if attack["id"] in seen:
            raise ConfigError(f"attacks/{i}/id", "duplicate attack id")
        seen.add(attack["id"])
        for j, store_id in enumerate(attack.get("stores", [])):
            if store_id not in ids:
                raise ConfigError(f"attacks/{i}/stores/{j}", f"unknown store {store_id!r}")
        if attack["kind"] == "pos_relocation" and attack["store"] not in ids:
            raise ConfigError(f"attacks/{i}/store", f"unknown store {attack['store']!r}")
        if attack["kind"] == "sybil" and attack.get("in_country", attack["operatives"]) > attack["operatives"]:
            raise ConfigError(f"attacks/{i}/in_country", "exceeds operatives")
        if attack["kind"] == "mail_redirect" and cfg["users"]["count"] == 0:
            raise ConfigError(f"attacks/{i}", "mail redirect needs resident victims (users/count > 0)")
        if "cost_params" in attack:
            from ..adversary import CostParams
            try:
                CostParams.from_dict(attack["cost_params"])
            except ValueError as exc:
                raise ConfigError(f"attacks/{i}/cost_params", str(exc)) from None
    return cfg


def load_scenario(path: str | Path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from None
    return validate(doc, path.parent)


def bundled_scenarios() -> list[str]:
    root = resources.files("posattest") / "scenarios"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def bundled_scenario_path(name: str) -> Path:
    return Path(str(resources.files("posattest") / "scenarios" / name))


def _honest_user(world: World, person, store_id: str, accounts):
    yield from world.address_round(person, store_id, accounts)


def build_world(cfg: dict, seed: int) -> tuple[World, list]:
    from ..adversary import (
        AttackPlan,
        CostParams,
        PlanKind,
        Technique,
        launch_attack,
        launch_mail_redirect,
        launch_pos_relocation,
    )

    world = World(cfg, seed)
    users = cfg["users"]
    user_stores = users.get("stores") or list(world.stores)
    pick = world.rng("users/traits")
    residents = []
    for i in range(users["count"]):
        pid = f"user:u{i + 1:04d}"
        person = world.add_person(
            pid, HONEST, f"addr-{i // users['per_address']:05d}",
            rooted=pick.random() < users["rooted_fraction"],
            prefers_ink=pick.random() < users["ink_fraction"],
            typo_rate=users["typo_rate"],
        )
        accounts = [(platform, f"u{i + 1:04d}") for platform in world.platforms]
        for platform, handle in accounts:
            person.app.login(platform, handle)
        start = world.rng(f"start/{pid}").randint(0, users["start_window_s"])
        world.spawn(_honest_user(world, person, user_stores[i % len(user_stores)], accounts), start)
        residents.append(person)

    trackers = []
    for attack in cfg["attacks"]:
        kind = attack["kind"]
        stores = attack.get("stores") or list(world.stores)
        params = CostParams.from_dict(attack.get("cost_params", {}))
        if kind in ("sybil", "colluder"):
            plan = AttackPlan(
                plan_id=attack["id"],
                kind=PlanKind(kind),
                technique=Technique(attack["technique"]) if kind == "sybil" else None,
                budget_usd=attack.get("budget_usd", float("inf")),
                operatives=attack.get("operatives", 0),
                in_country=attack.get("in_country"),
                address_pool=attack.get("address_pool", 1),
                recruits=attack.get("recruits", 0),
                acceptance=attack.get("acceptance", 1.0),
                rounds=attack.get("rounds", params.verifications_per_month),
                round_interval_s=attack.get("round_interval_s", 7 * DAY),
                start_s=attack.get("start_s", 0),
                stores=stores,
                fake_id_detect_prob=attack.get("fake_id_detect_prob", 0.0),
                params=params,
            )
            trackers.append(launch_attack(plan, world))
        elif kind == "mail_redirect":
            victims = sorted({p.address for p in residents})
            launch_mail_redirect(world, attack["id"], attack["attackers"], attack["mode"],
                                 attack.get("extra_delay_s", 3 * DAY if attack["mode"] == "delay" else 0),
                                 victims, stores)
        elif kind == "pos_relocation":
            launch_pos_relocation(world, attack["id"], attack["store"], attack["at_s"],
                                  attack.get("to_node", f"rogue:{attack['id']}"), attack.get("attackers", 0),
                                  attack.get("reregister_at_s"))
    return world, trackers


def collect_metrics(world: World, trackers: list) -> dict:
    ledger = world.ledger
    refusals: dict[str, int] = {}
    refusals_by_owner: dict[str, dict[str, int]] = {HONEST: {}, ADVERSARY: {}}
    for r in world.refusals:
        refusals[r.reason] = refusals.get(r.reason, 0) + 1
        bucket = refusals_by_owner[r.owner]
        bucket[r.reason] = bucket.get(r.reason, 0) + 1

    spend_by_plan: dict[str, int] = {}
    spend_by_item: dict[str, int] = {}
    for e in ledger.of_kind("purchase"):
        spend_by_plan[e.data["plan"]] = spend_by_plan.get(e.data["plan"], 0) + e.data["usd"]
        spend_by_item[e.data["item"]] = spend_by_item.get(e.data["item"], 0) + e.data["usd"]

    alerts = {e.actor: e.t for e in ledger.of_kind("pos_alert")}
    # tokens signed by a terminal after its alert and before any re-registration
    rereg = {}
    for e in ledger.of_kind("pos_reregistered"):
        rereg.setdefault(e.actor, []).append(e.t)
    after_alert = 0
    for e in ledger.of_kind("token"):
        actor = f"pos:{e.data['store']}"
        if actor in alerts and e.t >= alerts[actor] and not any(alerts[actor] <= t <= e.t for t in rereg.get(actor, [])):
            after_alert += 1

    adversary_tokens = [t for t in world.tokens if t.owner == ADVERSARY]
    attacks = {}
    for tracker in trackers:
        attacks[tracker.plan.plan_id] = tracker.outcome().to_json()
    for plan in sorted({t.plan for t in adversary_tokens if t.plan} | {r.plan for r in world.refusals if r.plan}):
        if plan in attacks:
            continue
        mine = [t for t in adversary_tokens if t.plan == plan]
        bottleneck: dict[str, int] = {}
        for r in world.refusals:
            if r.plan == plan:
                bottleneck[r.reason] = bottleneck.get(r.reason, 0) + 1
        attacks[plan] = {"plan_id": plan, "tokens": len(mine),
                         "accounts_attested": len({(t.platform, t.handle) for t in mine}),
                         "bottleneck": dict(sorted(bottleneck.items()))}

    return {
        "scenario": world.cfg["name"],
        "seed": world.seed,
        "sim_end_s": world.now,
        "events": len(ledger.events),
        "tokens_issued": len(world.tokens),
        "honest_tokens": len(world.tokens) - len(adversary_tokens),
        "adversary_tokens": len(adversary_tokens),
        "adversary_accounts_attested": len({(t.platform, t.handle) for t in adversary_tokens}),
        "refusals_total": len(world.refusals),
        "refusals_by_reason": dict(sorted(refusals.items())),
        "refusals_by_owner": {k: dict(sorted(v.items())) for k, v in refusals_by_owner.items()},
        "adversary_spend_usd": sum(spend_by_plan.values()),
        "spend_by_plan": dict(sorted(spend_by_plan.items())),
        "spend_by_item": dict(sorted(spend_by_item.items())),
        "pos_alerts": len(alerts),
        "tokens_after_alert": after_alert,
        "attacks": attacks,
        "registry": {
            "records": len(world.registry.records),
            "attested_accounts": world.registry.attested_accounts(),
        },
        "invariant_violations": list(world.invariant_violations),
    }


def run_scenario(config: dict, seed: int) -> tuple[RunLedger, dict]:
    """Run one world to its horizon. Same ``(config, seed)`` gives the same ledger bytes."""
    world, trackers = build_world(config, seed)
    world.run()
    return world.ledger, collect_metrics(world, trackers)


def run_world(config: dict, seed: int) -> tuple[World, dict]:
    """Like :func:`run_scenario` but hands back the world for inspection."""
    world, trackers = build_world(config, seed)
    world.run()
    return world, collect_metrics(world, trackers)
