"""Command-line entry point: ``posattest run|cost|verify|trilemma``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import crypto
from .adversary import CostParams, write_cost_tables
from .simnet import checks
from .simnet.scenario import (
    ConfigError,
    build_world,
    bundled_scenario_path,
    collect_metrics,
    load_scenario,
)
from .trilemma import no_agreement_fraction, sweep
from .verifier import report_csv

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CHECK = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for failed checks here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _summary_csv(metrics: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value"])

    def walk(prefix, value):
        if isinstance(value, dict):
            for k in sorted(value):
                walk(f"{prefix}.{k}" if prefix else k, value[k])
        elif isinstance(value, list):
            writer.writerow([prefix, len(value)])
        else:
            writer.writerow([prefix, value])

    walk("", metrics)
    return buf.getvalue()


def run_one(scenario_path: str, seed: int, out_dir: str, check: bool) -> tuple[int, list[str]]:
    """Run a scenario and write its artefacts; returns (seed, audit problems)."""
    cfg = load_scenario(scenario_path)
    world, trackers = build_world(cfg, seed)
    world.run()
    metrics = collect_metrics(world, trackers)
    problems = checks.audit(world) if check else []
    if check:
        metrics["check_problems"] = problems
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ledger.ndjson").write_text(world.ledger.to_ndjson())
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    (out / "summary.csv").write_text(_summary_csv(metrics))
    world.registry.dump(out / "registry.jsonl")
    (out / "tokens.txt").write_text("".join(t.token + "\n" for t in world.tokens))
    keys = {gid: crypto.export_public(pk) for gid, pk in sorted(world.group_publics().items())}
    (out / "group_keys.json").write_text(json.dumps(keys, indent=2, sort_keys=True) + "\n")
    return seed, problems


def _resolve_scenario(value: str) -> str:
    path = Path(value)
    if path.exists():
        return str(path)
    bundled = bundled_scenario_path(value if value.endswith(".json") else value + ".json")
    if bundled.exists():
        return str(bundled)
    raise ConfigError("scenario", f"no such file: {value}")


def cmd_run(args) -> int:
    scenario = _resolve_scenario(args.scenario)
    load_scenario(scenario)  # fail fast on config errors
    seeds = args.seed or [0]
    out = Path(args.out)
    dirs = {s: str(out if len(seeds) == 1 else out / f"seed-{s}") for s in seeds}
    if args.parallel_seeds and len(seeds) > 1:
        with ProcessPoolExecutor() as pool:
            results = list(pool.map(run_one, [scenario] * len(seeds), seeds, [dirs[s] for s in seeds],
                                    [args.check] * len(seeds)))
    else:
        results = [run_one(scenario, s, dirs[s], args.check) for s in seeds]
    failed = False
    for seed, problems in results:
        metrics = json.loads((Path(dirs[seed]) / "metrics.json").read_text())
        print(f"seed {seed}: tokens={metrics['tokens_issued']} refusals={metrics['refusals_total']} "
              f"adversary_accounts={metrics['adversary_accounts_attested']} -> {dirs[seed]}")
        for p in problems:
            print(f"  CHECK FAILED: {p}", file=sys.stderr)
        failed |= bool(problems)
    return EXIT_CHECK if failed else EXIT_OK


def cmd_cost(args) -> int:
    data = {}
    if args.params:
        try:
            data = json.loads(Path(args.params).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("params", str(exc)) from None
        if not isinstance(data, dict):
            raise ConfigError("params", "expected a JSON object")
    try:
        params = CostParams.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError("params", str(exc)) from None
    paths = write_cost_tables(params, args.out)
    sys.stdout.write(paths["totals"].read_text())
    return EXIT_OK


def _load_group_keys(path: str):
    text = Path(path).read_text().strip()
    try:
        if text.startswith("{"):
            return {label: crypto.import_public(blob) for label, blob in json.loads(text).items()}
        return crypto.import_public(text)
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError("group-key", str(exc)) from None


def cmd_verify(args) -> int:
    keys = _load_group_keys(args.group_key)
    if args.tokens and args.tokens != "-":
        lines = Path(args.tokens).read_text().splitlines()
    else:
        lines = sys.stdin.read().splitlines()
    if args.wall_clock:
        now = int(time.time())
    elif args.now is not None:
        now = args.now
    else:
        # simulated clock: the newest attestation in the batch
        from .verifier import verify_token
        stamps = [r.message.timestamp for r in (verify_token(t, keys, 2 ** 62) for t in lines if t.strip())
                  if r.accepted]
        now = max(stamps, default=0)
    max_age = args.max_age if args.max_age is not None else float("inf")
    if not max_age > 0:
        raise ConfigError("max-age", "must be positive")
    text = report_csv(lines, keys, now, max_age)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_trilemma(args) -> int:
    byz = [int(x) for x in args.byzantine.split(",") if x.strip()] if args.byzantine else []
    try:
        outcomes = sweep(args.n, byz, args.seeds, args.anchor, args.budget, args.max_latency)
    except ValueError as exc:
        raise ConfigError("trilemma", str(exc)) from None
    for o in outcomes:
        print(f"seed {o.seed}: {o.describe()}")
    frac = no_agreement_fraction(outcomes)
    print(f"no_agreement_fraction={frac:.4f} ({sum(not o.agreement for o in outcomes)}/{len(outcomes)})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="posattest", description="Store-anchored attestation simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("--scenario", required=True, help="scenario JSON path or bundled name")
    run.add_argument("--seed", type=int, action="append", help="repeat for several seeds")
    run.add_argument("--out", required=True)
    run.add_argument("--check", action="store_true", help="audit the run; exit 2 on any violation")
    run.add_argument("--parallel-seeds", action="store_true")
    run.set_defaults(func=cmd_run)

    cost = sub.add_parser("cost", help="write the attack cost tables")
    cost.add_argument("--params", help="JSON object overriding cost parameters")
    cost.add_argument("--out", required=True)
    cost.set_defaults(func=cmd_cost)

    verify = sub.add_parser("verify", help="check published tokens")
    verify.add_argument("--group-key", required=True, help="exported key blob or JSON map label -> blob")
    verify.add_argument("--tokens", help="file with one token per line (default stdin)")
    verify.add_argument("--now", type=int, help="simulated time in seconds")
    verify.add_argument("--wall-clock", action="store_true", help="measure age against the system clock")
    verify.add_argument("--max-age", type=int)
    verify.add_argument("--out")
    verify.set_defaults(func=cmd_verify)

    tri = sub.add_parser("trilemma", help="peer agreement with an equivocating participant")
    tri.add_argument("--n", type=int, required=True)
    tri.add_argument("--byzantine", default="", help="comma-separated participant ids")
    tri.add_argument("--seeds", type=int, default=1000)
    tri.add_argument("--anchor", type=int)
    tri.add_argument("--budget", type=int, default=60)
    tri.add_argument("--max-latency", type=int, default=10)
    tri.set_defaults(func=cmd_trilemma)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
